"""Step schedules and parameter-update rules.

Sign convention everywhere: updates ASCEND the supplied field, i.e.
phi' = phi + gamma * g. Objectives expose g = -grad f directly so callers
never juggle signs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Callable, List, Optional

import numpy as np

from .core import fmt_float
from .rng import RngStream

DIVERGENCE_NORM = 1e12


class DivergenceError(RuntimeError):
    """Non-finite parameter update. Carries the trajectory so far."""

    def __init__(self, msg, trajectory=None):
        super().__init__(msg)
        self.trajectory = trajectory


@dataclass(frozen=True)
class StepSchedule:
    kind: str
    evaluator: Callable

    def __call__(self, t: int) -> float:
        g = float(self.evaluator(int(t)))
        if not g > 0:
            raise ValueError(f"schedule produced non-positive step at t={t}: {g}")
        return g


def parametric_schedule(gamma0: float, C: float, alpha: float = 0.6) -> StepSchedule:
    """gamma0 * (1 + C*gamma0*t)^(-alpha).

    alpha in (1/2, 1] keeps the usual divergent-sum / summable-square
    trade-off; the 0.6 default leans toward the aggressive end.
    """
    if gamma0 <= 0 or C < 0:
        raise ValueError("need gamma0 > 0 and C >= 0")
    if not 0 < alpha <= 1:
        raise ValueError("alpha must lie in (0, 1]")
    return StepSchedule("parametric",
                        lambda t: gamma0 * (1.0 + C * gamma0 * t) ** (-alpha))


def constant_schedule(gamma: float) -> StepSchedule:
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return StepSchedule("constant", lambda t: gamma)


def custom_schedule(fn: Callable) -> StepSchedule:
    return StepSchedule("custom", fn)


@dataclass(frozen=True)
class OptimizerState:
    phi: np.ndarray
    prev_phi: np.ndarray
    polyak_sum: np.ndarray
    polyak_count: int
    t: int

    @staticmethod
    def initial(phi0) -> "OptimizerState":
        phi0 = np.atleast_1d(np.asarray(phi0, dtype=float)).copy()
        return OptimizerState(phi0, phi0.copy(), np.zeros_like(phi0), 0, 0)


def _gvalue(g_hat):
    v = getattr(g_hat, "value", g_hat)
    return np.atleast_1d(np.asarray(v, dtype=float))


def sgd_step(state: OptimizerState, g_hat, schedule: StepSchedule) -> OptimizerState:
    g = _gvalue(g_hat)
    if g.shape != state.phi.shape:
        raise ValueError("gradient dimension mismatch")
    gamma = schedule(state.t)
    phi_next = state.phi + gamma * g
    if not np.all(np.isfinite(phi_next)):
        raise DivergenceError(f"non-finite parameters at t={state.t + 1}")
    return replace(state, phi=phi_next, prev_phi=state.phi, t=state.t + 1)


def momentum_step(state: OptimizerState, g_hat, gamma: float,
                  beta: float) -> OptimizerState:
    """Heavy ball: phi' = phi + gamma*g + beta*(phi - prev_phi)."""
    if not 0 <= beta < 1:
        raise ValueError("beta must lie in [0, 1)")
    g = _gvalue(g_hat)
    phi_next = state.phi + gamma * g + beta * (state.phi - state.prev_phi)
    if not np.all(np.isfinite(phi_next)):
        raise DivergenceError(f"non-finite parameters at t={state.t + 1}")
    return replace(state, phi=phi_next, prev_phi=state.phi, t=state.t + 1)


def polyak_record(state: OptimizerState) -> OptimizerState:
    """Fold the current iterate into the running Polyak sum. Drivers call
    this only after their burn-in point."""
    return replace(state, polyak_sum=state.polyak_sum + state.phi,
                   polyak_count=state.polyak_count + 1)


def polyak_average(state: OptimizerState) -> np.ndarray:
    if state.polyak_count < 1:
        raise ValueError("no post-burn-in iterates recorded yet")
    return state.polyak_sum / state.polyak_count


@dataclass
class SgdReport:
    phi_trace: np.ndarray       # (T+1, m), row 0 = phi0
    gamma_trace: np.ndarray     # (T,)
    grad_norms: np.ndarray      # (T,)
    state: OptimizerState
    diverged: bool = False
    divergence_t: Optional[int] = None

    @property
    def final_phi(self) -> np.ndarray:
        return self.phi_trace[-1]


def run_sgd(field_fn: Callable, phi0, schedule: StepSchedule, T: int,
            rng: Optional[RngStream] = None, burn_in: float = 0.5) -> SgdReport:
    """Drive T ascent steps of phi' = phi + gamma_t * field(phi, t, rng).

    Polyak recording starts after floor(burn_in * T) steps. The norm guard
    stops the run and reports the divergent trajectory instead of raising.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    state = OptimizerState.initial(phi0)
    m = state.phi.size
    phis = np.empty((T + 1, m))
    phis[0] = state.phi
    gammas = np.empty(T)
    norms = np.empty(T)
    burn_steps = int(math.floor(burn_in * T))
    for t in range(T):
        g = np.atleast_1d(np.asarray(field_fn(state.phi, t, rng), dtype=float))
        norms[t] = float(np.linalg.norm(g))
        gammas[t] = schedule(t)
        try:
            state = sgd_step(state, g, schedule)
        except DivergenceError:
            return SgdReport(phis[:t + 1].copy(), gammas[:t + 1].copy(),
                             norms[:t + 1].copy(), state, True, t + 1)
        phis[t + 1] = state.phi
        if state.t > burn_steps:
            state = polyak_record(state)
        if float(np.linalg.norm(state.phi)) > DIVERGENCE_NORM:
            return SgdReport(phis[:t + 2].copy(), gammas[:t + 1].copy(),
                             norms[:t + 1].copy(), state, True, t + 1)
    return SgdReport(phis, gammas, norms, state)


@dataclass
class RoundReport:
    phi_rounds: List[np.ndarray]   # phi^(r) for r = 1..R
    round_sizes: List[int]
    retried_rounds: List[int]
    total_samples: int


def round_based_driver(adapt_round: Callable, rounds: int, phi0,
                       rng: RngStream, feasible=None,
                       burn_fraction: float = 0.1) -> RoundReport:
    """Doubling-batch adaptation: round r draws 2^r samples under the
    previous round's parameters, trims the leading burn_fraction, and sets
    the next parameters to the trimmed mean of sufficient statistics.

    adapt_round(phi, round_size, rng) -> (stat_rows, samples); stat_rows is
    (round_size, p). An infeasible round mean (per `feasible`) is retried
    once at doubled size, then raises.
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    phi = np.atleast_1d(np.asarray(phi0, dtype=float)).copy()
    phi_rounds, sizes, retried = [], [], []
    total = 0
    for r in range(1, rounds + 1):
        size = 2 ** r
        total += size
        stats, _ = adapt_round(phi, size, rng.substream(r))
        mean = _trimmed_stat_mean(stats, burn_fraction)
        if feasible is not None and not feasible(mean):
            retried.append(r)
            total += 2 * size
            stats, _ = adapt_round(phi, 2 * size, rng.substream(rounds + 1 + r))
            mean = _trimmed_stat_mean(stats, burn_fraction)
            if not feasible(mean):
                raise ValueError(f"round {r} statistics infeasible even after retry")
        phi = mean
        phi_rounds.append(phi.copy())
        sizes.append(size)
    return RoundReport(phi_rounds, sizes, retried, total)


def _trimmed_stat_mean(stats, burn_fraction: float) -> np.ndarray:
    stats = np.atleast_2d(np.asarray(stats, dtype=float))
    n = stats.shape[0]
    skip = int(math.floor(burn_fraction * n))
    if skip >= n:
        skip = n - 1
    return stats[skip:].mean(axis=0)


def write_trajectory_csv(path, report: SgdReport):
    m = report.phi_trace.shape[1]
    header = "t,gamma_t," + ",".join(f"phi_{i + 1}" for i in range(m)) + ",grad_norm"
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t in range(report.gamma_trace.size):
            row = [str(t + 1), fmt_float(report.gamma_trace[t])]
            row += [fmt_float(v) for v in report.phi_trace[t + 1]]
            row.append(fmt_float(report.grad_norms[t]))
            fh.write(",".join(row) + "\n")
