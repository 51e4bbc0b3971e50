"""Non-reversible parallel tempering with a tunable reference.

A ladder of annealed densities bridges a tractable reference and the
target; each sweep runs one local move per chain, then deterministically
alternates even/odd adjacent swaps (DEO). Replica indices are tracked so
round trips, the real currency of PT mixing, can be counted. The reference
can be a variational family member retuned between rounds by moment
matching on the target chain.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, List, Optional, Sequence

import numpy as np

from .core import (IidKernel, KernelError, MarkovKernel, SliceKernel,
                   TargetDensity, mh_accept)
from .expfam import ExpFamily, SuffStatAccumulator, moment_to_natural
from .rng import RngStream


@dataclass(frozen=True)
class AnnealingPath:
    kind: str                               # single_leg | two_leg
    log_reference: Callable                 # x -> real (q_phi)
    log_target: Callable                    # x -> real (pi)
    dim: int
    log_pi0: Optional[Callable] = None      # fixed leg endpoint (two_leg)

    def log_density_at(self, beta: float, x) -> float:
        if not 0.0 <= beta <= 1.0:
            raise ValueError("beta must lie in [0, 1]")
        if self.kind == "single_leg":
            if beta == 0.0:
                return float(self.log_reference(x))
            if beta == 1.0:
                return float(self.log_target(x))
            return ((1.0 - beta) * float(self.log_reference(x))
                    + beta * float(self.log_target(x)))
        # two_leg: reference -> target on [0, 1/2], then target -> pi0
        if beta <= 0.5:
            if beta == 0.5:
                return float(self.log_target(x))
            return ((1.0 - 2.0 * beta) * float(self.log_reference(x))
                    + 2.0 * beta * float(self.log_target(x)))
        if beta == 1.0:
            return float(self.log_pi0(x))
        return ((2.0 * beta - 1.0) * float(self.log_pi0(x))
                + (2.0 - 2.0 * beta) * float(self.log_target(x)))

    def target_beta(self) -> float:
        return 1.0 if self.kind == "single_leg" else 0.5


def single_leg_path(log_reference: Callable, target: TargetDensity) -> AnnealingPath:
    return AnnealingPath("single_leg", log_reference, target.log_density, target.dim)


def two_leg_path(log_reference: Callable, log_pi0: Callable,
                 target: TargetDensity) -> AnnealingPath:
    return AnnealingPath("two_leg", log_reference, target.log_density,
                         target.dim, log_pi0)


def tempered_target(path: AnnealingPath, beta: float, name: str = "") -> TargetDensity:
    return TargetDensity(lambda x: path.log_density_at(beta, x), path.dim,
                         name=name or f"tempered[{beta}]")


@dataclass(frozen=True)
class Schedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=float)
        object.__setattr__(self, "betas", b)
        if b.ndim != 1 or b.size < 1:
            raise ValueError("schedule needs at least one beta")
        if b.size == 1:
            # degenerate ladder: just the target chain
            if b[0] != 1.0:
                raise ValueError("a single-level schedule must sit at beta = 1")
        elif b[0] != 0.0 or b[-1] != 1.0:
            raise ValueError("schedule endpoints must be exactly 0 and 1")
        if np.any(np.diff(b) < 0):
            raise ValueError("schedule must be monotone")

    @property
    def n_chains(self) -> int:
        return self.betas.size

    @property
    def n_pairs(self) -> int:
        return self.betas.size - 1


def equally_spaced_schedule(n: int) -> Schedule:
    """n+1 levels 0, 1/n, ..., 1; n = 0 degenerates to the lone target."""
    if n < 0:
        raise ValueError("n must be >= 0")
    if n == 0:
        return Schedule(np.asarray([1.0]))
    return Schedule(np.linspace(0.0, 1.0, n + 1))


@dataclass
class ReplicaEnsemble:
    states: np.ndarray                  # (n_chains, dim)
    schedule: Schedule
    replica_indices: np.ndarray         # permutation: chain slot -> replica id
    swap_attempts: np.ndarray           # per adjacent pair
    swap_accepts: np.ndarray

    @staticmethod
    def initial(schedule: Schedule, x0) -> "ReplicaEnsemble":
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        n = schedule.n_chains
        states = np.tile(x0, (n, 1)) if x0.ndim == 1 else np.array(x0, dtype=float)
        if states.shape[0] != n:
            raise ValueError("x0 must broadcast to one state per chain")
        return ReplicaEnsemble(states, schedule, np.arange(n),
                               np.zeros(max(n - 1, 0), dtype=np.int64),
                               np.zeros(max(n - 1, 0), dtype=np.int64))

    def check_permutation(self):
        if not np.array_equal(np.sort(self.replica_indices),
                              np.arange(self.schedule.n_chains)):
            raise AssertionError("replica indices are not a permutation")


def local_exploration(ensemble: ReplicaEnsemble, path: AnnealingPath,
                      kernels: Sequence[MarkovKernel], rng) -> ReplicaEnsemble:
    """One local move per chain.

    rng may be a single stream (chains advanced serially from it) or a
    sequence of per-chain streams (each single-owner, reusable across
    sweeps); the latter makes chain updates order-independent.
    """
    n = ensemble.schedule.n_chains
    if len(kernels) != n:
        raise ValueError("need one kernel per chain")
    per_chain = not isinstance(rng, RngStream)
    for c in range(n):
        stream = rng[c] if per_chain else rng
        try:
            ensemble.states[c] = kernels[c].step(ensemble.states[c], stream)
        except KernelError as e:
            raise KernelError(f"chain {c} (beta={ensemble.schedule.betas[c]}): {e}") from e
    return ensemble


def deo_swap(ensemble: ReplicaEnsemble, path: AnnealingPath, t: int,
             rng: RngStream) -> ReplicaEnsemble:
    """Deterministic even-odd swap phase for sweep t (1-based): even-indexed
    adjacent pairs when t-1 is even, odd-indexed otherwise. Accepted swaps
    exchange both states and replica indices."""
    betas = ensemble.schedule.betas
    start = 0 if (t - 1) % 2 == 0 else 1
    for n in range(start, ensemble.schedule.n_pairs, 2):
        b_lo, b_hi = betas[n], betas[n + 1]
        x_lo, x_hi = ensemble.states[n], ensemble.states[n + 1]
        log_ratio = (path.log_density_at(b_lo, x_hi) + path.log_density_at(b_hi, x_lo)
                     - path.log_density_at(b_lo, x_lo) - path.log_density_at(b_hi, x_hi))
        u = rng.uniform()
        ensemble.swap_attempts[n] += 1
        if mh_accept(log_ratio, u):
            ensemble.swap_accepts[n] += 1
            ensemble.states[[n, n + 1]] = ensemble.states[[n + 1, n]]
            ensemble.replica_indices[[n, n + 1]] = ensemble.replica_indices[[n + 1, n]]
    return ensemble


def nrpt_chain_streams(rng: RngStream, n_chains: int):
    """The stream layout one tempering run owns: one persistent substream
    per chain plus one for the swap phase."""
    return [rng.substream(c) for c in range(n_chains)], rng.substream(n_chains)


@dataclass
class NrptReport:
    target_trace: np.ndarray
    swap_attempts: np.ndarray
    swap_accepts: np.ndarray
    round_trips_per_replica: np.ndarray
    ensemble: ReplicaEnsemble
    target_chain_index: int
    replica_history: Optional[np.ndarray] = None

    @property
    def round_trips(self) -> int:
        return int(self.round_trips_per_replica.sum())

    @property
    def swap_rates(self) -> np.ndarray:
        with np.errstate(invalid="ignore"):
            return np.where(self.swap_attempts > 0,
                            self.swap_accepts / np.maximum(self.swap_attempts, 1),
                            np.nan)


def nrpt_run(path: AnnealingPath, schedule: Schedule,
             kernels: Sequence[MarkovKernel], T: int, rng: RngStream,
             x0, keep_replica_history: bool = False) -> NrptReport:
    """T sweeps of local exploration + DEO swaps; records the chain sitting
    at the path's target level (beta = 1 single leg, beta = 0.5 two leg)."""
    if T < 1:
        raise ValueError("T must be >= 1")
    n = schedule.n_chains
    target_beta = path.target_beta()
    matches = np.where(schedule.betas == target_beta)[0]
    if matches.size == 0:
        raise ValueError(f"schedule must contain the target level {target_beta}")
    target_idx = int(matches[0])
    ensemble = ReplicaEnsemble.initial(schedule, x0)
    chain_rngs, swap_rng = nrpt_chain_streams(rng, n)
    trace = np.empty((T, ensemble.states.shape[1]))
    trips = np.zeros(n, dtype=np.int64)
    visited_top = np.zeros(n, dtype=bool)
    history = np.empty((T, n), dtype=np.int64) if keep_replica_history else None
    for t in range(1, T + 1):
        local_exploration(ensemble, path, kernels, chain_rngs)
        deo_swap(ensemble, path, t, swap_rng)
        trace[t - 1] = ensemble.states[target_idx]
        top_replica = ensemble.replica_indices[n - 1]
        visited_top[top_replica] = True
        bottom_replica = ensemble.replica_indices[0]
        if visited_top[bottom_replica]:
            trips[bottom_replica] += 1
            visited_top[bottom_replica] = False
        if history is not None:
            history[t - 1] = ensemble.replica_indices
    ensemble.check_permutation()
    return NrptReport(trace, ensemble.swap_attempts.copy(),
                      ensemble.swap_accepts.copy(), trips, ensemble,
                      target_idx, history)


def default_path_kernels(path: AnnealingPath, schedule: Schedule,
                         reference_sampler: Optional[Callable] = None,
                         pi0_sampler: Optional[Callable] = None,
                         slice_width: float = 2.0) -> List[MarkovKernel]:
    """Slice kernels on every tempered level, with exact iid draws at the
    endpoints whose densities admit a sampler."""
    kernels: List[MarkovKernel] = []
    for i, beta in enumerate(schedule.betas):
        level = tempered_target(path, float(beta))
        if beta == 0.0 and reference_sampler is not None:
            kernels.append(IidKernel(level, reference_sampler))
        elif (beta == 1.0 and path.kind == "two_leg" and pi0_sampler is not None):
            kernels.append(IidKernel(level, pi0_sampler))
        else:
            kernels.append(SliceKernel(level, width=slice_width))
    return kernels


# ---------------------------------------------------------------------------
# variational reference tuning

@dataclass
class VptReport:
    phi_rounds: List[np.ndarray]
    flagged_rounds: List[int]
    final_phi: np.ndarray
    last_target_trace: np.ndarray
    sweeps_per_round: List[int]


def tune_variational_reference(path_builder: Callable, rounds: int,
                               rng: RngStream, family: ExpFamily, phi0,
                               x0) -> VptReport:
    """Round-based adaptation: round r runs 2^r sweeps under the current
    reference parameters, then moment-matches the target-chain statistics.
    Rounds whose statistics are infeasible keep the previous parameters and
    are flagged.

    path_builder(phi) -> (path, schedule, kernels).
    """
    if rounds < 1:
        raise ValueError("rounds must be >= 1")
    phi = np.atleast_1d(np.asarray(phi0, dtype=float)).copy()
    phi_rounds, flagged, sweeps_list = [], [], []
    trace = None
    for r in range(1, rounds + 1):
        sweeps = 2 ** r
        path, schedule, kernels = path_builder(phi)
        report = nrpt_run(path, schedule, kernels, sweeps, rng.substream(r), x0)
        trace = report.target_trace
        acc = SuffStatAccumulator(family.stat_dim, family=family)
        for row in trace:
            acc.update(family.suff_stat(row))
        candidate = acc.mean
        if family.feasible_moments(candidate):
            phi = candidate
        else:
            flagged.append(r)
        phi_rounds.append(phi.copy())
        sweeps_list.append(sweeps)
    return VptReport(phi_rounds, flagged, phi.copy(), trace, sweeps_list)


def gaussian_reference_builder(family: ExpFamily, target: TargetDensity,
                               n_chains: int, kind: str = "single_leg",
                               log_pi0: Optional[Callable] = None,
                               pi0_sampler: Optional[Callable] = None,
                               slice_width: float = 2.0) -> Callable:
    """path_builder for tune_variational_reference with an expfam reference."""
    schedule = equally_spaced_schedule(n_chains)

    def build(phi):
        eta = moment_to_natural(family, phi)

        def log_ref(x):
            return family.log_density(x, eta)

        def ref_sampler(rng):
            return family.sample(eta, rng)

        if kind == "single_leg":
            path = single_leg_path(log_ref, target)
        else:
            path = two_leg_path(log_ref, log_pi0, target)
        kernels = default_path_kernels(path, schedule, ref_sampler,
                                       pi0_sampler, slice_width)
        return path, schedule, kernels

    return build


# ---------------------------------------------------------------------------
# effective sample size

def _autocorrelations(x: np.ndarray) -> np.ndarray:
    n = x.size
    xc = x - x.mean()
    m = 1
    while m < 2 * n:
        m *= 2
    f = np.fft.rfft(xc, m)
    acov = np.fft.irfft(f * np.conjugate(f))[:n].real / n
    if acov[0] <= 0:
        return np.zeros(n)
    return acov / acov[0]


def ess(trace: np.ndarray) -> np.ndarray:
    """Per-coordinate effective sample size via the initial-positive-
    sequence estimate of the integrated autocorrelation time. A constant
    coordinate reports the minimal value 1."""
    trace = np.asarray(trace, dtype=float)
    if trace.ndim == 1:
        trace = trace[:, None]
    T, d = trace.shape
    if T < 100:
        raise ValueError("need at least 100 samples for an ESS estimate")
    out = np.empty(d)
    for j in range(d):
        col = trace[:, j]
        if np.all(col == col[0]) or float(np.var(col)) == 0.0:
            out[j] = 1.0
            continue
        rho = _autocorrelations(col)
        tau = -1.0
        m = 0
        while 2 * m + 1 < rho.size:
            pair = rho[2 * m] + rho[2 * m + 1]
            if pair <= 0.0:
                break
            tau += 2.0 * pair
            m += 1
        tau = max(tau, 1e-12)
        out[j] = T / tau
    return out


def ess_per_second(trace: np.ndarray, wall_time: float) -> np.ndarray:
    if wall_time <= 0:
        raise ValueError("wall_time must be positive")
    return ess(trace) / wall_time


# ---------------------------------------------------------------------------
# reporting

def write_swap_stats_csv(path_out, report: NrptReport):
    with open(path_out, "w") as fh:
        fh.write("pair,attempts,accepts\n")
        for i in range(report.swap_attempts.size):
            fh.write(f"{i},{int(report.swap_attempts[i])},{int(report.swap_accepts[i])}\n")


def write_roundtrips_csv(path_out, report: NrptReport):
    with open(path_out, "w") as fh:
        fh.write("replica,round_trips\n")
        for i, v in enumerate(report.round_trips_per_replica):
            fh.write(f"{i},{int(v)}\n")
