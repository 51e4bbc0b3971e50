"""The adaptive optimization-integration loop.

One step: update the parameters from the current chain state, then advance
the chain under the kernel built from the NEW parameters,

    phi_{t+1} = phi_t + gamma_t * g(x_t, phi_t)
    x_{t+1}   ~ kernel(phi_{t+1}) applied n_t times.

With an iid kernel this is exactly stochastic gradient ascent; with n_t = 1
it is the single-draw loop, and growing n_t buys extra mixing per update.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import (DensityError, IidKernel, KernelError, MarkovKernel,
                   TargetDensity, fmt_float, mh_accept)
from .optim import DIVERGENCE_NORM, DivergenceError, StepSchedule
from .rng import RngStream


class MoiStepError(RuntimeError):
    """Kernel or field failure inside the loop, with (t, phi) context."""


@dataclass(frozen=True)
class MoiProblem:
    target_family: Callable            # phi -> TargetDensity
    kernel_factory: Callable           # phi -> MarkovKernel
    g: Callable                        # (x, phi) -> field value
    f: Optional[Callable] = None       # (x, phi) -> objective integrand
    mean_field: Optional[Callable] = None  # phi -> exact field, when known
    name: str = ""


@dataclass(frozen=True)
class AdaptiveState:
    phi: np.ndarray
    x: np.ndarray
    t: int
    nt: Callable                       # t -> number of kernel applications

    @staticmethod
    def initial(phi0, x0, nt) -> "AdaptiveState":
        return AdaptiveState(np.atleast_1d(np.asarray(phi0, dtype=float)).copy(),
                             np.atleast_1d(np.asarray(x0, dtype=float)).copy(),
                             0, nt)


def nt_schedule(kind: str, n: int = 1) -> Callable:
    """constant(n), or log_growth: ceil(1 + log(1 + t))."""
    if kind == "constant":
        if n < 1:
            raise ValueError("n must be >= 1")
        return lambda t: n
    if kind == "log_growth":
        return lambda t: int(math.ceil(1.0 + math.log(1.0 + t)))
    raise ValueError(f"unknown nt schedule kind {kind!r}")


def adaptive_step(problem: MoiProblem, state: AdaptiveState,
                  schedule: StepSchedule, rng: RngStream) -> AdaptiveState:
    gamma = schedule(state.t)
    try:
        g_val = np.atleast_1d(np.asarray(problem.g(state.x, state.phi), dtype=float))
    except (KernelError, DensityError) as e:
        raise MoiStepError(f"field evaluation failed at t={state.t}, "
                           f"phi={state.phi!r}: {e}") from e
    phi_next = state.phi + gamma * g_val
    if not np.all(np.isfinite(phi_next)):
        raise DivergenceError(f"non-finite parameters at t={state.t + 1}")
    x = state.x
    try:
        kernel = problem.kernel_factory(phi_next)
        for _ in range(int(state.nt(state.t))):
            x = kernel.step(x, rng)
    except (KernelError, DensityError) as e:
        raise MoiStepError(f"kernel step failed at t={state.t}, "
                           f"phi={phi_next!r}: {e}") from e
    return AdaptiveState(phi_next, np.atleast_1d(np.asarray(x, dtype=float)),
                         state.t + 1, state.nt)


@dataclass
class MoiReport:
    phi_trace: np.ndarray     # (T+1, m), row 0 = phi0
    x_trace: np.ndarray       # (T+1, d), row 0 = x0
    grad_norms: np.ndarray    # (T,)
    gamma_trace: np.ndarray   # (T,)
    diverged: bool = False
    divergence_t: Optional[int] = None

    @property
    def final_phi(self) -> np.ndarray:
        return self.phi_trace[-1]


def run_moi(problem: MoiProblem, phi0, x0, schedule: StepSchedule,
            nt: Callable, T: int, rng: RngStream) -> MoiReport:
    """T adaptive steps with the optim-style divergence guard: a parameter
    norm beyond 1e12 stops the run and flags the report instead of raising.

    grad_norms holds the exact field norm when the problem supplies one,
    otherwise the norm of the sampled field value at each step.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    state = AdaptiveState.initial(phi0, x0, nt)
    m, d = state.phi.size, state.x.size
    phis = np.empty((T + 1, m))
    xs = np.empty((T + 1, d))
    norms = np.empty(T)
    gammas = np.empty(T)
    phis[0], xs[0] = state.phi, state.x
    for t in range(T):
        gammas[t] = schedule(t)
        if problem.mean_field is not None:
            norms[t] = float(np.linalg.norm(
                np.atleast_1d(np.asarray(problem.mean_field(state.phi), dtype=float))))
        else:
            norms[t] = float(np.linalg.norm(
                np.atleast_1d(np.asarray(problem.g(state.x, state.phi), dtype=float))))
        try:
            state = adaptive_step(problem, state, schedule, rng)
        except DivergenceError:
            return MoiReport(phis[:t + 1].copy(), xs[:t + 1].copy(),
                             norms[:t + 1].copy(), gammas[:t + 1].copy(), True, t + 1)
        phis[t + 1], xs[t + 1] = state.phi, state.x
        if float(np.linalg.norm(state.phi)) > DIVERGENCE_NORM:
            return MoiReport(phis[:t + 2].copy(), xs[:t + 2].copy(),
                             norms[:t + 1].copy(), gammas[:t + 1].copy(), True, t + 1)
    return MoiReport(phis, xs, norms, gammas)


@dataclass
class LlnReport:
    running_averages: np.ndarray
    final_average: float
    final_error: float


def lln_check(x_trace, h: Callable, reference_mean: float) -> LlnReport:
    """Prefix averages of a bounded statistic along the trace, and the
    terminal deviation from the reference value."""
    x_trace = np.atleast_2d(np.asarray(x_trace, dtype=float))
    if x_trace.shape[0] == 0:
        raise ValueError("x_trace must be nonempty")
    vals = np.asarray([float(h(row)) for row in x_trace])
    running = np.cumsum(vals) / np.arange(1, vals.size + 1)
    return LlnReport(running, float(running[-1]),
                     float(abs(running[-1] - reference_mean)))


# ---------------------------------------------------------------------------
# named, config-runnable example problems

_LOG_2PI = math.log(2.0 * math.pi)


def _norm_logpdf(x: float, m: float, s: float) -> float:
    z = (x - m) / s
    return -0.5 * z * z - math.log(s) - 0.5 * _LOG_2PI


def reverse_kl_vi_problem(p_mean: float = 1.0, p_sd: float = 0.7) -> MoiProblem:
    """Black-box variational fit of a 1-D Gaussian: the kernel draws iid
    from q_phi and the field is the score-function gradient of
    KL(q_phi || p), so the loop is plain SGD on the variational objective.

    phi = (mean, log sd); the optimum is p's own parameters.
    """

    def q_target(phi):
        m, ls = float(phi[0]), float(phi[1])
        s = math.exp(ls)
        return TargetDensity(lambda x: _norm_logpdf(float(x[0]), m, s),
                             dim=1, name="vi_variational")

    def kernel_factory(phi):
        m, ls = float(phi[0]), float(phi[1])
        s = math.exp(ls)
        return IidKernel(q_target(phi),
                         lambda rng: np.asarray([m + s * rng.normal()]))

    def f(x, phi):
        m, ls = float(phi[0]), float(phi[1])
        s = math.exp(ls)
        xv = float(x[0])
        return _norm_logpdf(xv, m, s) - _norm_logpdf(xv, p_mean, p_sd)

    def g(x, phi):
        m, ls = float(phi[0]), float(phi[1])
        s = math.exp(ls)
        xv = float(x[0])
        score = np.asarray([(xv - m) / (s * s), ((xv - m) / s) ** 2 - 1.0])
        return -f(x, phi) * score

    return MoiProblem(q_target, kernel_factory, g, f=f, name="reverse_kl_vi")


class TwoStateStickyKernel(MarkovKernel):
    """Slow-mixing chain on {-1, +1}: flip with a small probability."""

    def __init__(self, target: TargetDensity, flip_prob: float):
        if not 0.0 < flip_prob < 1.0:
            raise ValueError("flip_prob must be in (0, 1)")
        self.target = target
        self.flip_prob = flip_prob

    def step(self, x, rng):
        if rng.uniform() < self.flip_prob:
            return np.asarray([-float(x[0])])
        return np.asarray([float(x[0])])


def mcgd_two_state_problem(flip_prob: float = 0.1) -> MoiProblem:
    """Markov chain gradient descent with a fixed kernel: quadratic
    objective E[(phi - X)^2 / 2] under the symmetric two-state chain, so
    the optimum is E[X] = 0 while consecutive draws are highly dependent."""
    target = TargetDensity(
        lambda x: math.log(0.5) if abs(abs(float(x[0])) - 1.0) < 1e-12 else -math.inf,
        dim=1, name="two_state_uniform")

    def g(x, phi):
        return np.asarray([float(x[0]) - float(phi[0])])

    return MoiProblem(lambda phi: target,
                      lambda phi: TwoStateStickyKernel(target, flip_prob),
                      g,
                      f=lambda x, phi: 0.5 * (float(phi[0]) - float(x[0])) ** 2,
                      mean_field=lambda phi: np.asarray([-float(phi[0])]),
                      name="mcgd_two_state")


class FlagRwmhKernel(MarkovKernel):
    """Random-walk step on a standard normal with the acceptance flag
    carried in the state's second coordinate."""

    def __init__(self, target: TargetDensity, step_sd: float):
        if step_sd <= 0 or not math.isfinite(step_sd):
            raise KernelError(f"bad random-walk scale {step_sd}")
        self.target = target
        self.step_sd = step_sd

    def step(self, x, rng):
        cur = float(x[0])
        prop = cur + self.step_sd * rng.normal()
        log_ratio = -0.5 * prop * prop + 0.5 * cur * cur
        if mh_accept(log_ratio, rng.uniform()):
            return np.asarray([prop, 1.0])
        return np.asarray([cur, 0.0])


def acceptance_tuning_problem(alpha_star: float = 0.44) -> MoiProblem:
    """Tune a random-walk scale toward a target acceptance rate.

    phi = log step_sd; the field pushes the scale up when the last step
    accepted more often than alpha_star and down otherwise, the standard
    surrogate for descending (acceptance - alpha_star)^2.
    """
    target = TargetDensity(lambda x: -0.5 * float(x[0]) ** 2, dim=2,
                           name="stdnormal_with_flag")

    def kernel_factory(phi):
        return FlagRwmhKernel(target, math.exp(float(phi[0])))

    def g(x, phi):
        return np.asarray([float(x[1]) - alpha_star])

    return MoiProblem(lambda phi: target, kernel_factory, g,
                      name="acceptance_tuning")


EXAMPLE_PROBLEMS = {
    "reverse_kl_vi": reverse_kl_vi_problem,
    "mcgd_two_state": mcgd_two_state_problem,
    "acceptance_tuning": acceptance_tuning_problem,
}

_PROBLEM_DEFAULTS = {
    "reverse_kl_vi": ([0.0, 0.0], [0.0]),
    "mcgd_two_state": ([1.0], [1.0]),
    "acceptance_tuning": ([0.0], [0.0, 0.0]),
}


def example_problem(name: str):
    """Returns (problem, default phi0, default x0) for a named example."""
    if name not in EXAMPLE_PROBLEMS:
        raise ValueError(f"unknown problem {name!r}; choose from "
                         f"{sorted(EXAMPLE_PROBLEMS)}")
    phi0, x0 = _PROBLEM_DEFAULTS[name]
    return EXAMPLE_PROBLEMS[name](), np.asarray(phi0, dtype=float), np.asarray(x0, dtype=float)


def write_moi_trace_csv(path, report: MoiReport, stride: Optional[int] = None):
    """Trajectory CSV, downsampled to at most ~1000 rows by default."""
    T = report.gamma_trace.size
    if stride is None:
        stride = max(1, int(math.ceil(T / 1000)))
    m = report.phi_trace.shape[1]
    header = "t,gamma_t," + ",".join(f"phi_{i + 1}" for i in range(m)) + ",grad_norm"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t in range(0, T, stride):
            row = [str(t + 1), fmt_float(report.gamma_trace[t])]
            row += [fmt_float(v) for v in report.phi_trace[t + 1]]
            row.append(fmt_float(report.grad_norms[t]))
            fh.write(",".join(row) + "\n")
