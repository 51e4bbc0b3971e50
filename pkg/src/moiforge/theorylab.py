"""Numerical lab for the convergence theory of the adaptive loop.

Three kinds of artifact live here: scripted counterexamples where the loop
misbehaves (escape along a decaying tail, stalls from too-fast step decay,
oscillation blow-up, noise balls, heavy-tailed instability, sticky-kernel
lock-in); certified test problems whose smoothness/noise constants are
known analytically; and checkers that hold simulated trajectories against
the nonasymptotic bounds those constants imply.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable, List, Optional, Sequence

import numpy as np

from .optim import DIVERGENCE_NORM, StepSchedule, constant_schedule, custom_schedule
from .rng import RngStream

FIELD_AUDIT_POINTS = 100
FIELD_AUDIT_TOL = 1e-6


# ---------------------------------------------------------------------------
# counterexample specs

@dataclass(frozen=True)
class CounterexampleSpec:
    name: str
    f: Callable                    # objective, scalar phi -> real
    g: Callable                    # field, scalar phi -> real (g = -f')
    schedule: StepSchedule
    phi0: float
    expected: str                  # diverge | stall | converge
    stall_limit: Optional[float] = None
    stall_tol: float = 1e-3
    converge_to: float = 0.0
    converge_tol: float = 5e-2
    escape_threshold: Optional[float] = None
    audit_range: tuple = (-3.0, 3.0)


def _wiggle_f(phi):
    return (1.0 - np.exp(-phi * phi) + np.exp(-(phi - 2.0) ** 2)
            + np.exp(-(phi + 2.0) ** 2))


def _wiggle_g(phi):
    # -f': pulled toward 0 inside the central basin, pushed outward beyond
    # the shoulder bumps at +-2
    return (2.0 * phi * np.exp(-phi * phi)
            - 2.0 * (phi - 2.0) * np.exp(-(phi - 2.0) ** 2)
            - 2.0 * (phi + 2.0) * np.exp(-(phi + 2.0) ** 2)) * -1.0


def wiggle_spec(phi0: float = 2.5) -> CounterexampleSpec:
    """Flat-tailed objective: a start beyond the shoulder escapes outward
    for any step sequence with divergent sum."""
    expected = "diverge" if abs(phi0) > 2.1 else "converge"
    return CounterexampleSpec(
        name="wiggle", f=_wiggle_f, g=_wiggle_g,
        schedule=custom_schedule(lambda t: 1.0 / (t + 1.0)),
        phi0=phi0, expected=expected, escape_threshold=3.0)


def quadratic_stall_spec(phi0: float = 1.0) -> CounterexampleSpec:
    """Steps 1/(t+2)^2 decay too fast: the iterate freezes at
    phi0 * prod(1 - gamma_k) = phi0/2, never reaching the optimum at 0.

    The schedule is shifted by one so no single factor is zero.
    """
    return CounterexampleSpec(
        name="quadratic_stall",
        f=lambda p: 0.5 * p * p, g=lambda p: -p,
        schedule=custom_schedule(lambda t: 1.0 / (t + 2.0) ** 2),
        phi0=phi0, expected="stall", stall_limit=0.5 * phi0)


def quadratic_diverge_spec(phi0: float = 1.0) -> CounterexampleSpec:
    """Constant step 3 on the unit quadratic: phi_{t+1} = -2 phi_t."""
    return CounterexampleSpec(
        name="quadratic_diverge",
        f=lambda p: 0.5 * p * p, g=lambda p: -p,
        schedule=constant_schedule(3.0),
        phi0=phi0, expected="diverge")


def cosh_spec(phi0: float = 1.39) -> CounterexampleSpec:
    """Non-Lipschitz gradient: oscillation amplitude explodes within a
    handful of steps despite the decaying schedule."""
    return CounterexampleSpec(
        name="cosh",
        f=lambda p: np.exp(p) + np.exp(-p),
        g=lambda p: -(np.exp(p) - np.exp(-p)),
        schedule=custom_schedule(lambda t: 1.0 / (t + 1.0)),
        phi0=phi0, expected="diverge")


ALL_COUNTEREXAMPLES = {
    "wiggle": wiggle_spec,
    "quadratic_stall": quadratic_stall_spec,
    "quadratic_diverge": quadratic_diverge_spec,
    "cosh": cosh_spec,
}


def audit_field(spec: CounterexampleSpec, rng: RngStream,
                n_points: int = FIELD_AUDIT_POINTS,
                tol: float = FIELD_AUDIT_TOL) -> float:
    """Check g == -f' by central differences at random points; returns the
    worst deviation."""
    lo, hi = spec.audit_range
    h = 1e-4
    worst = 0.0
    for _ in range(n_points):
        p = lo + (hi - lo) * rng.uniform()
        fd = (float(spec.f(p + h)) - float(spec.f(p - h))) / (2.0 * h)
        dev = abs(float(spec.g(p)) + fd)
        worst = max(worst, dev)
    if worst > tol:
        raise AssertionError(
            f"field audit failed for {spec.name}: |g + f'| up to {worst}")
    return worst


@dataclass
class CounterexampleReport:
    name: str
    verdict: str
    phi_trace: np.ndarray
    diverged_at: Optional[int] = None


def run_counterexample(spec: CounterexampleSpec, T: int,
                       rng: Optional[RngStream] = None) -> CounterexampleReport:
    """Deterministic recursion phi' = phi + gamma_t g(phi) with the norm
    guard; classifies the outcome and raises if it contradicts the spec's
    expected behavior."""
    if T < 1:
        raise ValueError("T must be >= 1")
    phis = [float(spec.phi0)]
    phi = float(spec.phi0)
    diverged_at = None
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            phi = phi + spec.schedule(t) * float(spec.g(phi))
            phis.append(phi)
            if not math.isfinite(phi) or abs(phi) > DIVERGENCE_NORM:
                diverged_at = t + 1
                break
    trace = np.asarray(phis)
    verdict = _classify(spec, trace, diverged_at)
    if verdict != spec.expected:
        raise AssertionError(
            f"counterexample {spec.name}: expected {spec.expected}, observed {verdict} "
            f"(final phi {trace[-1]!r})")
    return CounterexampleReport(spec.name, verdict, trace, diverged_at)


def _classify(spec, trace, diverged_at) -> str:
    if diverged_at is not None:
        return "diverge"
    last = float(trace[-1])
    if spec.expected == "stall" and spec.stall_limit is not None:
        if abs(last - spec.stall_limit) <= spec.stall_tol and spec.stall_limit != 0.0:
            return "stall"
        return "other"
    if spec.escape_threshold is not None:
        # escape along a flat tail: beyond the watershed, still drifting
        # outward, tail monotone in the drift direction
        tail = trace[trace.size // 2:]
        sign = 1.0 if last >= 0 else -1.0
        monotone = bool(np.all(np.diff(sign * tail) >= 0))
        outward = sign * float(spec.g(last)) > 0
        if abs(last) > spec.escape_threshold and monotone and outward:
            return "diverge"
    if abs(last - spec.converge_to) <= spec.converge_tol:
        return "converge"
    return "other"


# ---------------------------------------------------------------------------
# noise ball

@dataclass
class NoiseBallSummary:
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    expected_mean: float
    expected_variance: float
    se_mean: float
    traces: Optional[np.ndarray] = None


def noise_ball_second_moment(t: int, phi0: float) -> float:
    """Exact E[phi_t^2] for the constant-1/2-step noisy quadratic."""
    return phi0 * phi0 * 4.0 ** (-t) + (1.0 - 4.0 ** (-t)) / 3.0


def noise_ball_experiment(T: int = 50, reps: int = 10000,
                          rng: Optional[RngStream] = None, phi0: float = 1.0,
                          trace_reps: int = 0) -> NoiseBallSummary:
    """phi' = phi/2 + Z/2 across independent replications; the terminal law
    is the N(0, 1/3) noise ball plus an exponentially small offset.

    Asserts: mean within 3 SE of phi0 * 2^-T, variance within 5% of 1/3,
    and moment-based normality (|skew| and |excess kurtosis| below the
    0.001-level bounds for this replication count).
    """
    if rng is None:
        raise ValueError("rng required")
    phi = np.full(reps, float(phi0))
    kept = [] if trace_reps > 0 else None
    if kept is not None:
        kept.append(phi[:trace_reps].copy())
    for _ in range(T):
        z = rng.normal(size=reps)
        phi = 0.5 * phi + 0.5 * z
        if kept is not None:
            kept.append(phi[:trace_reps].copy())
    mean = float(phi.mean())
    var = float(phi.var(ddof=1))
    sd = math.sqrt(var)
    centered = phi - mean
    skew = float(np.mean(centered ** 3)) / sd ** 3
    kurt = float(np.mean(centered ** 4)) / sd ** 4 - 3.0
    exp_mean = phi0 * 2.0 ** (-T)
    se_mean = sd / math.sqrt(reps)
    if abs(mean - exp_mean) > 3.0 * se_mean:
        raise AssertionError(f"noise-ball mean {mean} not within 3 SE of {exp_mean}")
    if abs(var - 1.0 / 3.0) > 0.05 / 3.0:
        raise AssertionError(f"noise-ball variance {var} not within 5% of 1/3")
    # two-sided 0.001-level z bounds on the sample skewness and kurtosis
    if abs(skew) > 3.2905 * math.sqrt(6.0 / reps):
        raise AssertionError(f"noise-ball skewness {skew} rejects normality")
    if abs(kurt) > 3.2905 * math.sqrt(24.0 / reps):
        raise AssertionError(f"noise-ball kurtosis {kurt} rejects normality")
    traces = np.asarray(kept).T if kept is not None else None
    return NoiseBallSummary(mean, var, skew, kurt, exp_mean, 1.0 / 3.0, se_mean, traces)


# ---------------------------------------------------------------------------
# heavy-tailed instability

LOG_CAP = 1e12
_LOG_SWITCH = 690.0     # switch to log representation just below overflow


@dataclass
class UnboundedVarianceReport:
    escape_fraction: float
    per_t_doubling: np.ndarray
    first_step_prob_mc: float
    first_step_prob_exact: float
    traces: Optional[np.ndarray] = None


def _phi_cdf(z: float) -> float:
    return 0.5 * (1.0 + math.erf(z / math.sqrt(2.0)))


def first_step_escape_prob(phi0: float = 2.0) -> float:
    """P(|phi_1| > 2^2) for the exponential-scale update at phi0 = 2."""
    half = 0.5 * math.exp(phi0)
    # gamma_0 = 1/2, so phi_1 = phi0/2 + (exp(phi0)/2) Z
    keep = 0.5 * phi0
    # phi_1 = keep + half * Z; |phi_1| > 4
    upper = (4.0 - keep) / half
    lower = (-4.0 - keep) / half
    return (1.0 - _phi_cdf(upper)) + _phi_cdf(lower)


def unbounded_variance_experiment(T: int = 30, reps: int = 10000,
                                  rng: Optional[RngStream] = None,
                                  phi0: float = 2.0,
                                  trace_reps: int = 0) -> UnboundedVarianceReport:
    """phi' = (1-gamma_t) phi + gamma_t exp(phi) Z with gamma_t = 1/(2(t+1)).

    A run "escapes" when |phi_t| > 2^(t+1) at every step t >= 1 up to T.
    Magnitudes are tracked as log|phi| once they pass the float-safe range;
    a positive phi at that scale feeds exp(phi) and is capped as
    permanently escaped.
    """
    if rng is None:
        raise ValueError("rng required")
    phi = np.full(reps, float(phi0))
    log_mag = np.full(reps, -np.inf)       # active where in log representation
    sign = np.ones(reps)
    in_log = np.zeros(reps, dtype=bool)
    alive = np.ones(reps, dtype=bool)      # doubling held at every t so far
    per_t = np.empty(T)
    kept = [] if trace_reps > 0 else None
    if kept is not None:
        kept.append(phi[:trace_reps].copy())
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(T):
            gamma = 1.0 / (2.0 * (t + 1.0))
            z = rng.normal(size=reps)
            # plain representation
            plain = ~in_log
            drift = (1.0 - gamma) * phi[plain] + gamma * np.exp(phi[plain]) * z[plain]
            phi[plain] = drift
            # promote overflowing entries
            promote = plain & (np.abs(phi) > 10.0 ** 300)
            if np.any(promote):
                in_log[promote] = True
                sign[promote] = np.sign(phi[promote])
                with np.errstate(divide="ignore"):
                    log_mag[promote] = np.where(
                        np.isfinite(phi[promote]), np.log(np.abs(phi[promote])), _LOG_SWITCH)
                phi[promote] = 0.0
            # log representation: positive branch explodes through exp(phi)
            # (sign handed to the noise draw, magnitude capped), negative
            # branch only shrinks by (1 - gamma)
            pos = in_log & (sign > 0)
            neg = in_log & (sign < 0)
            log_mag[neg] = log_mag[neg] + math.log1p(-gamma)
            if np.any(pos):
                sign[pos] = np.where(z[pos] >= 0.0, 1.0, -1.0)
                log_mag[pos] = LOG_CAP
            # the loop body builds phi_{t+1}; its doubling threshold is
            # 2^(t+2), i.e. |phi_s| > 2^(s+1) at step s = t + 1
            thresh = (t + 2.0) * math.log(2.0)
            with np.errstate(divide="ignore"):
                cur_log = np.where(in_log, log_mag, np.log(np.abs(phi)))
            ok = cur_log > thresh
            per_t[t] = float(np.mean(ok))
            alive &= ok
            if kept is not None:
                vis = np.where(in_log[:trace_reps],
                               sign[:trace_reps] * np.exp(np.minimum(cur_log[:trace_reps], 700.0)),
                               phi[:trace_reps])
                kept.append(vis)
    escape = float(np.mean(alive))
    if escape < 1.0 / reps:
        raise AssertionError("no run kept doubling through the horizon")
    # first-step check against the closed-form normal probability
    mc = float(per_t[0])
    exact = first_step_escape_prob(phi0)
    se = math.sqrt(exact * (1.0 - exact) / reps)
    if abs(mc - exact) > 3.0 * se + 1e-9:
        raise AssertionError(
            f"first-step escape frequency {mc} vs exact {exact} beyond 3 SE")
    traces = np.asarray(kept).T if kept is not None else None
    return UnboundedVarianceReport(escape, per_t, mc, exact, traces)


# ---------------------------------------------------------------------------
# sticky-kernel lock-in

def lockin_field(x: float, phi: float) -> float:
    """Piecewise field of the two-state lock-in problem (ascent form)."""
    if x > 0:
        return 2.0 - 2.0 * phi if phi <= 0 else 2.0
    return -2.0 if phi <= 0 else -2.0 * (1.0 + phi)


def lockin_objective(x: float, phi: float) -> float:
    if x > 0:
        return (phi - 1.0) ** 2 if phi <= 0 else 1.0 - 2.0 * phi
    return 1.0 + 2.0 * phi if phi <= 0 else (1.0 + phi) ** 2


def lockin_toggle_prob(phi: float) -> float:
    return math.exp(-math.exp(min(abs(phi), 700.0)))


@dataclass
class LockinReport:
    stuck_fraction: float
    stuck_phi_final: float
    phi_final: np.ndarray
    toggled: np.ndarray
    traces: Optional[np.ndarray] = None


def truncated_no_toggle_product(n: int = 5) -> float:
    """prod_{t=1..n} (1 - exp(-t^2)), the crude lower-bound product."""
    out = 1.0
    for t in range(1, n + 1):
        out *= 1.0 - math.exp(-float(t * t))
    return out


def younes_experiment(T: int = 1000, reps: int = 2000,
                      rng: Optional[RngStream] = None,
                      nt: Optional[Callable] = None,
                      trace_reps: int = 0) -> LockinReport:
    """Two-state chain whose toggle probability collapses doubly
    exponentially in |phi|: most runs never toggle and phi marches off.

    nt gives the kernel applications per update (default 1). The never-
    toggled path is deterministic, so stuck_phi_final is a single number.
    """
    if rng is None:
        raise ValueError("rng required")
    if nt is None:
        nt = lambda t: 1
    phi = np.zeros(reps)
    x = np.ones(reps)
    toggled = np.zeros(reps, dtype=bool)
    kept = [] if trace_reps > 0 else None
    if kept is not None:
        kept.append(phi[:trace_reps].copy())
    for t in range(T):
        gamma = 1.0 / (t + 1.0)
        gp = np.where(x > 0,
                      np.where(phi <= 0, 2.0 - 2.0 * phi, 2.0),
                      np.where(phi <= 0, -2.0, -2.0 * (1.0 + phi)))
        phi = phi + gamma * gp
        p = np.exp(-np.exp(np.minimum(np.abs(phi), 700.0)))
        n_k = int(nt(t))
        flips = np.zeros(reps, dtype=np.int64)
        for _ in range(n_k):
            flips += (rng.uniform(size=reps) < p).astype(np.int64)
        toggled |= flips > 0
        x = np.where(flips % 2 == 1, -x, x)
        if kept is not None:
            kept.append(phi[:trace_reps].copy())
    stuck = ~toggled
    frac = float(np.mean(stuck))
    stuck_final = float(phi[stuck][0]) if np.any(stuck) else math.nan
    traces = np.asarray(kept).T if kept is not None else None
    return LockinReport(frac, stuck_final, phi.copy(), toggled.copy(), traces)


# ---------------------------------------------------------------------------
# certified problems and nonasymptotic bound checks

@dataclass(frozen=True)
class TheoremProblem:
    """A test problem whose smoothness/noise constants are certified by
    hand, so simulated trajectories can be held against the matching bound."""

    name: str
    regime: str                       # deterministic | iid | markov
    mean_field: Callable              # phi -> real (exact field)
    objective: Callable               # phi -> real
    f_lower: float
    L: float
    schedule: StepSchedule
    phi0: float
    a: float = 0.0
    b: float = 0.0
    rho_fn: Optional[Callable] = None     # k -> rho_k
    nt_fn: Optional[Callable] = None      # t -> kernel applications
    draw_noise: Optional[Callable] = None  # rng -> x (iid regime)
    kernel_step: Optional[Callable] = None  # (x, rng) -> x (markov regime)
    x0: float = 1.0
    log_from: int = 0                 # first t with a positive bound denominator
    field_value: Optional[Callable] = None        # (x, phi) -> field sample
    cond_field_mean: Optional[Callable] = None    # (x, k, phi) exact
    cond_field_second: Optional[Callable] = None  # (x, k, phi) exact
    mixing_eigvalue: Optional[float] = None


def deterministic_quadratic_problem() -> TheoremProblem:
    return TheoremProblem(
        name="quadratic_deterministic", regime="deterministic",
        mean_field=lambda p: -p, objective=lambda p: 0.5 * p * p,
        f_lower=0.0, L=1.0, schedule=constant_schedule(0.5), phi0=1.0)


def iid_quadratic_problem() -> TheoremProblem:
    # E (x - phi)^2 = 1 + phi^2 <= a + b*phi^2 with a = 1, b = 1
    return TheoremProblem(
        name="quadratic_iid", regime="iid",
        mean_field=lambda p: -p,
        objective=lambda p: 0.5 * p * p + 0.5,
        f_lower=0.5, L=1.0,
        schedule=custom_schedule(lambda t: 1.0 / (2.0 * (t + 1.0))),
        phi0=1.0, a=1.0, b=1.0,
        draw_noise=lambda rng: rng.normal(),
        field_value=lambda x, p: -p + x)


def markov_toggle_problem() -> TheoremProblem:
    """Two states +-1, toggle probability 1/4 per application.

    Second transition eigenvalue 1/2 gives E[X_k | x] = x 2^-k exactly, and
    the drift/noise conditions certify with a = 2, b = 2, rho_k = 2^-k.
    The per-step bound denominator only turns positive at t = 2 for this
    step sequence, so logging starts there.
    """
    def kernel_step(x, rng):
        return -x if rng.uniform() < 0.25 else x

    return TheoremProblem(
        name="quadratic_markov", regime="markov",
        mean_field=lambda p: -p,
        objective=lambda p: 0.5 * p * p + 0.5,
        f_lower=0.5, L=1.0,
        schedule=custom_schedule(lambda t: 1.0 / (5.0 * (t + 1.0))),
        phi0=1.0, a=2.0, b=2.0,
        rho_fn=lambda k: 2.0 ** (-k),
        nt_fn=lambda t: int(math.ceil(1.0 + math.log2(1.0 + t))),
        kernel_step=kernel_step, x0=1.0, log_from=2,
        field_value=lambda x, p: -p + x,
        cond_field_mean=lambda x, k, p: -p + x * 2.0 ** (-k),
        cond_field_second=lambda x, k, p: p * p - 2.0 * p * x * 2.0 ** (-k) + 1.0,
        mixing_eigvalue=0.5)


def bound_rhs(problem: TheoremProblem, T: int) -> np.ndarray:
    """Right-hand side of the matching min-gradient bound at each t < T."""
    gammas = np.asarray([problem.schedule(t) for t in range(T)])
    gap = float(problem.objective(problem.phi0)) - problem.f_lower
    L = problem.L
    if problem.regime == "deterministic":
        den = np.cumsum(gammas * (1.0 - gammas * L / 2.0))
        num = np.full(T, gap)
    elif problem.regime == "iid":
        num = gap + np.cumsum(gammas * gammas * problem.a * L) / 2.0
        den = np.cumsum(gammas * (1.0 - gammas * problem.b * L / 2.0))
    elif problem.regime == "markov":
        rhos = np.asarray([problem.rho_fn(problem.nt_fn(t)) for t in range(T)])
        num = gap + np.cumsum(problem.a * (gammas * gammas * L + 2.0 * gammas * rhos)) / 2.0
        den = np.cumsum(gammas * (1.0 - (2.0 * rhos * problem.a + gammas * problem.b * L) / 2.0))
    else:
        raise ValueError(f"unknown regime {problem.regime!r}")
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(den > 0, num / den, np.inf)


def logged_ts(T: int, start: int = 0) -> List[int]:
    """Dense early grid, then geometric, always including T-1."""
    ts = set(range(start, min(start + 10, T)))
    v = start + 10
    while v < T:
        ts.add(v)
        v = int(math.ceil(v * 1.5))
    ts.add(T - 1)
    return sorted(t for t in ts if start <= t < T)


@dataclass
class BoundReport:
    name: str
    regime: str
    ts: List[int]
    empirical: np.ndarray
    se: np.ndarray
    rhs: np.ndarray


def verify_theorem_bound(problem: TheoremProblem, T: int,
                         reps: int = 200,
                         rng: Optional[RngStream] = None) -> BoundReport:
    """min_{k<=t} |field(phi_k)|^2 (mean over reps when stochastic, plus a
    3 SE allowance) must sit below the certified bound at every logged t."""
    ts = logged_ts(T, problem.log_from)
    rhs_full = bound_rhs(problem, T)
    rhs = rhs_full[ts]
    if problem.regime == "deterministic":
        mins = _min_gradient_curve_deterministic(problem, T)
        emp = mins[ts]
        se = np.zeros(len(ts))
        for i, t in enumerate(ts):
            if emp[i] > rhs[i]:
                raise AssertionError(
                    f"{problem.name}: bound violated at t={t}: {emp[i]} > {rhs[i]}")
        return BoundReport(problem.name, problem.regime, ts, emp, se, rhs)
    if rng is None:
        raise ValueError("rng required for stochastic regimes")
    curves = np.empty((reps, len(ts)))
    for r in range(reps):
        mins = _min_gradient_curve_stochastic(problem, T, rng.substream(r))
        curves[r] = mins[ts]
    emp = curves.mean(axis=0)
    se = curves.std(axis=0, ddof=1) / math.sqrt(reps)
    for i, t in enumerate(ts):
        if emp[i] - 3.0 * se[i] > rhs[i]:
            raise AssertionError(
                f"{problem.name}: bound violated at t={t}: "
                f"{emp[i]} - 3*{se[i]} > {rhs[i]}")
    return BoundReport(problem.name, problem.regime, ts, emp, se, rhs)


def _min_gradient_curve_deterministic(problem, T):
    phi = float(problem.phi0)
    mins = np.empty(T)
    cur = float(problem.mean_field(phi)) ** 2
    for t in range(T):
        mins[t] = cur
        phi = phi + problem.schedule(t) * float(problem.mean_field(phi))
        cur = min(cur, float(problem.mean_field(phi)) ** 2)
    return mins


def _min_gradient_curve_stochastic(problem, T, rng):
    phi = float(problem.phi0)
    if problem.regime == "markov":
        x = float(problem.x0)
    mins = np.empty(T)
    cur = float(problem.mean_field(phi)) ** 2
    for t in range(T):
        mins[t] = cur
        if problem.regime == "iid":
            x = float(problem.draw_noise(rng))
        g = float(problem.field_value(x, phi))
        phi = phi + problem.schedule(t) * g
        if problem.regime == "markov":
            for _ in range(int(problem.nt_fn(t))):
                x = problem.kernel_step(x, rng)
        cur = min(cur, float(problem.mean_field(phi)) ** 2)
    return mins


def theorem1_bound_exact(t: int) -> Fraction:
    """Exact-arithmetic bound for the deterministic quadratic at step t."""
    gamma, L = Fraction(1, 2), Fraction(1)
    gap = Fraction(1, 2)          # f(phi0) - lower value at phi0 = 1
    den = (t + 1) * gamma * (1 - gamma * L / 2)
    return gap / den


def theorem1_check_exact(T: int = 10000) -> bool:
    """min_k g(phi_k)^2 <= bound, checked in exact rationals for every t."""
    phi = Fraction(1)
    min_sq = phi * phi
    half = Fraction(1, 2)
    for t in range(T):
        if min_sq > theorem1_bound_exact(t):
            raise AssertionError(f"exact bound violated at t={t}")
        phi = phi - half * phi
        min_sq = min(min_sq, phi * phi)
    return True


# ---------------------------------------------------------------------------
# assumption audit

@dataclass
class AuditReport:
    name: str
    l_audit: float
    worst_second_moment_slack: float
    worst_mixing_slack: float


def audit_assumptions(problem: TheoremProblem,
                      phi_grid: Optional[Sequence[float]] = None,
                      k_max: int = 12) -> AuditReport:
    """Recompute the certified constants from the problem's own maps and
    assert the configured values dominate.

    L from max |d field/d phi| on a grid; the noise conditions from the
    exact conditional moments on state/lag/parameter grids.
    """
    if phi_grid is None:
        phi_grid = np.linspace(-5.0, 5.0, 201)
    h = 1e-5
    l_audit = max(abs(float(problem.mean_field(p + h)) - float(problem.mean_field(p - h)))
                  / (2.0 * h) for p in phi_grid)
    if problem.L + 1e-8 < l_audit:
        raise AssertionError(f"{problem.name}: configured L={problem.L} below audited {l_audit}")
    worst_sm = -math.inf
    worst_mix = -math.inf
    if problem.regime == "iid":
        # E field(x, phi)^2 for standard normal noise on the linear field
        for p in phi_grid:
            second = 1.0 + p * p
            budget = problem.a + problem.b * float(problem.mean_field(p)) ** 2
            worst_sm = max(worst_sm, second - budget)
        if worst_sm > 1e-8:
            raise AssertionError(f"{problem.name}: (a, b) fail to dominate the noise second moment")
    elif problem.regime == "markov":
        lam = problem.mixing_eigvalue
        for k in range(1, k_max + 1):
            if problem.rho_fn(k) + 1e-12 < lam ** k:
                raise AssertionError(f"{problem.name}: rho_{k} below the audited eigenvalue decay")
            for x in (-1.0, 1.0):
                for p in phi_grid:
                    gbar = float(problem.mean_field(p))
                    budget = problem.rho_fn(k) * (problem.a + problem.b * gbar * gbar)
                    drift = abs(gbar * float(problem.cond_field_mean(x, k, p)) - gbar * gbar)
                    worst_mix = max(worst_mix, drift - budget)
                    second = problem.rho_fn(k) * float(problem.cond_field_second(x, k, p))
                    worst_sm = max(worst_sm, second - budget)
        if worst_mix > 1e-8 or worst_sm > 1e-8:
            raise AssertionError(f"{problem.name}: mixing-noise conditions fail to certify")
    return AuditReport(problem.name, l_audit,
                       worst_sm if worst_sm > -math.inf else 0.0,
                       worst_mix if worst_mix > -math.inf else 0.0)
