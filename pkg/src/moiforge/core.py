"""Target densities, Markov kernels, and the chain driver.

States are 1-D float arrays. A TargetDensity wraps an unnormalized
log-density; kernels hold a target and advance a state with an explicit
RngStream, so every chain is reproducible from (seed, stream) alone.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import RngStream


class DensityError(ValueError):
    """A log-density evaluated to NaN (or was otherwise unusable)."""


class KernelError(RuntimeError):
    """A kernel could not complete a transition (bracket growth cap, etc.)."""


class ChainAbort(RuntimeError):
    """Chain run aborted mid-stream. Carries the partial trace."""

    def __init__(self, message: str, trace: np.ndarray):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class TargetDensity:
    """Unnormalized log-density on R^dim.

    `components`, when given, must satisfy log_density(x) == sum of the
    component evaluations; mini-batch consumers rely on that decomposition.
    """

    log_density: Callable[[np.ndarray], float]
    dim: int
    components: Optional[tuple] = None
    name: str = ""

    @property
    def component_count(self) -> Optional[int]:
        return None if self.components is None else len(self.components)

    def __call__(self, x) -> float:
        lp = float(self.log_density(np.asarray(x, dtype=float)))
        if math.isnan(lp):
            raise DensityError(f"log-density returned NaN at x={x!r}")
        return lp


def mh_accept(log_ratio: float, u: float) -> bool:
    """Metropolis-Hastings decision: accept iff log(u) < min(0, log_ratio).

    log_ratio = -Inf rejects for any u > 0; NaN is a DensityError, never a
    silent reject.
    """
    if math.isnan(log_ratio):
        raise DensityError("NaN acceptance log-ratio")
    log_u = math.log(u) if u > 0.0 else -math.inf
    return log_u < min(0.0, log_ratio)


class AcceptanceStats:
    """Accept/step counters shared by all MH-style kernels."""

    def __init__(self):
        self.accept_count = 0
        self.step_count = 0

    def record(self, accepted: bool):
        self.step_count += 1
        if accepted:
            self.accept_count += 1

    @property
    def rate(self) -> float:
        if self.step_count == 0:
            return math.nan
        return self.accept_count / self.step_count

    def as_dict(self) -> dict:
        return {"accept_count": self.accept_count, "step_count": self.step_count}


class MarkovKernel:
    """Base transition rule. Subclasses leave `target` invariant."""

    target: TargetDensity
    stats: Optional[AcceptanceStats] = None

    def step(self, x: np.ndarray, rng: RngStream) -> np.ndarray:
        raise NotImplementedError


class RandomWalkKernel(MarkovKernel):
    """Symmetric Gaussian random-walk Metropolis."""

    def __init__(self, target: TargetDensity, step_sd):
        self.target = target
        self.step_sd = np.broadcast_to(np.asarray(step_sd, dtype=float), (target.dim,)).copy()
        if np.any(self.step_sd <= 0):
            raise ValueError("step_sd must be positive")
        self.stats = AcceptanceStats()

    def step(self, x, rng):
        x = np.asarray(x, dtype=float)
        prop = x + self.step_sd * rng.normal(size=x.shape)
        log_ratio = self.target(prop) - self.target(x)
        u = rng.uniform()
        accepted = mh_accept(log_ratio, u)
        self.stats.record(accepted)
        return prop.copy() if accepted else x.copy()


class IndependenceMHKernel(MarkovKernel):
    """Independence Metropolis-Hastings with an arbitrary proposal.

    `propose(rng)` draws from the proposal, `log_proposal(x)` evaluates its
    log-density. Acceptance is computed in log space; a current state with
    zero target density is always left (alpha = 1) provided the proposal
    density sees the current state and the proposed point lies in the
    target support.
    """

    def __init__(self, target: TargetDensity, propose, log_proposal, name: str = "imh"):
        self.target = target
        self.propose = propose
        self.log_proposal = log_proposal
        self.name = name
        self.stats = AcceptanceStats()

    def step(self, x, rng):
        x = np.asarray(x, dtype=float)
        prop = np.asarray(self.propose(rng), dtype=float)
        num = self.target(prop) + float(self.log_proposal(x))
        den = self.target(x) + float(self.log_proposal(prop))
        u = rng.uniform()  # drawn unconditionally to keep stream use state-free
        if math.isnan(num) or math.isnan(den):
            raise DensityError("NaN in IMH acceptance ratio")
        if den == -math.inf:
            accepted = num > -math.inf
        else:
            accepted = mh_accept(num - den, u)
        self.stats.record(accepted)
        return prop.copy() if accepted else x.copy()

    @property
    def rejection_rate(self) -> float:
        return 1.0 - self.stats.rate


class SliceKernel(MarkovKernel):
    """Coordinate-wise slice sampler (stepping out + shrinkage).

    Coordinates are updated in fixed order 0..dim-1 every step. Bracket
    expansion and shrinkage are capped; hitting a cap means the target is
    degenerate for this width and raises KernelError.
    """

    def __init__(self, target: TargetDensity, width: float = 1.0,
                 max_expansions: int = 1000, max_shrinks: int = 1000):
        if width <= 0:
            raise ValueError("width must be positive")
        self.target = target
        self.width = float(width)
        self.max_expansions = int(max_expansions)
        self.max_shrinks = int(max_shrinks)

    def step(self, x, rng):
        x = np.array(x, dtype=float, copy=True)
        # hot path: a sweep makes O(dim) density calls, so go through
        # log_density directly with a local NaN guard
        density = self.target.log_density
        uniform = rng.uniform

        def logp_at() -> float:
            lp = float(density(x))
            if math.isnan(lp):
                raise DensityError(f"log-density returned NaN at x={x!r}")
            return lp

        logp = logp_at()
        if logp == -math.inf:
            raise KernelError("slice step started at a zero-density state")
        w = self.width
        for i in range(self.target.dim):
            level = logp + math.log(uniform())
            lo = x[i] - uniform() * w
            hi = lo + w
            old = x[i]
            for _ in range(self.max_expansions):
                x[i] = lo
                if logp_at() <= level:
                    break
                lo -= w
            else:
                x[i] = old
                raise KernelError(f"slice bracket expansion cap hit (coordinate {i})")
            for _ in range(self.max_expansions):
                x[i] = hi
                if logp_at() <= level:
                    break
                hi += w
            else:
                x[i] = old
                raise KernelError(f"slice bracket expansion cap hit (coordinate {i})")
            for _ in range(self.max_shrinks):
                cand = lo + uniform() * (hi - lo)
                x[i] = cand
                cand_logp = logp_at()
                if cand_logp > level:
                    logp = cand_logp
                    break
                if cand < old:
                    lo = cand
                else:
                    hi = cand
            else:
                x[i] = old
                raise KernelError(f"slice shrinkage cap hit (coordinate {i})")
        return x


class IidKernel(MarkovKernel):
    """Exact sampler wrapped as a kernel; the step ignores the current state."""

    def __init__(self, target: TargetDensity, sampler):
        self.target = target
        self.sampler = sampler

    def step(self, x, rng):
        out = np.asarray(self.sampler(rng), dtype=float)
        if out.shape != (self.target.dim,):
            raise KernelError("iid sampler returned a state of the wrong shape")
        return out


class ComposedKernel(MarkovKernel):
    """Sequential composition of kernels sharing one target."""

    def __init__(self, kernels: Sequence[MarkovKernel]):
        if not kernels:
            raise ValueError("compose needs at least one kernel")
        t0 = kernels[0].target
        for k in kernels:
            same = k.target is t0 or (
                k.target.dim == t0.dim and k.target.log_density is t0.log_density
            )
            if not same:
                raise ValueError("composed kernels must share a target")
        self.kernels = list(kernels)
        self.target = t0

    def step(self, x, rng):
        for k in self.kernels:
            x = k.step(x, rng)
        return x


class MixtureKernel(MarkovKernel):
    """Pick one kernel per step with fixed probabilities."""

    def __init__(self, kernels: Sequence[MarkovKernel], weights=None):
        if not kernels:
            raise ValueError("mixture needs at least one kernel")
        t0 = kernels[0].target
        for k in kernels:
            same = k.target is t0 or (
                k.target.dim == t0.dim and k.target.log_density is t0.log_density
            )
            if not same:
                raise ValueError("mixed kernels must share a target")
        self.kernels = list(kernels)
        if weights is None:
            weights = np.full(len(kernels), 1.0 / len(kernels))
        self.weights = np.asarray(weights, dtype=float)
        if self.weights.shape != (len(kernels),) or np.any(self.weights < 0):
            raise ValueError("weights must be nonnegative, one per kernel")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        self.target = t0

    def step(self, x, rng):
        idx = rng.choice(len(self.kernels), p=self.weights)
        return self.kernels[idx].step(x, rng)


def compose(kernels: Sequence[MarkovKernel]) -> ComposedKernel:
    return ComposedKernel(kernels)


def mix(kernels: Sequence[MarkovKernel], weights=None) -> MixtureKernel:
    return MixtureKernel(kernels, weights)


def rwmh_kernel(target: TargetDensity, step_sd) -> RandomWalkKernel:
    return RandomWalkKernel(target, step_sd)


def slice_kernel(target: TargetDensity, width: float = 1.0) -> SliceKernel:
    return SliceKernel(target, width)


def compose_kernels(kernels: Sequence[MarkovKernel]) -> ComposedKernel:
    return ComposedKernel(kernels)


def mix_kernels(adaptive: MarkovKernel, fixed: MarkovKernel,
                weight: float) -> MixtureKernel:
    """Safeguarded mixture: pick the adaptive kernel with probability
    `weight`, the fixed fallback otherwise."""
    if not 0.0 <= weight <= 1.0:
        raise ValueError("weight must lie in [0, 1]")
    return MixtureKernel([adaptive, fixed], [weight, 1.0 - weight])


def run_chain(kernel: MarkovKernel, x0, steps: int, rng: RngStream) -> np.ndarray:
    """Advance `kernel` for `steps` transitions; returns the (steps, dim) trace.

    A KernelError mid-run becomes a ChainAbort carrying the partial trace.
    """
    if steps < 0:
        raise ValueError("steps must be >= 0")
    x = np.array(x0, dtype=float, copy=True)
    if x.shape != (kernel.target.dim,):
        raise ValueError(f"x0 must have shape ({kernel.target.dim},)")
    trace = np.empty((steps, kernel.target.dim))
    for t in range(steps):
        try:
            x = kernel.step(x, rng)
        except KernelError as e:
            raise ChainAbort(f"chain aborted at step {t}: {e}", trace[:t].copy()) from e
        trace[t] = x
    return trace


def fmt_float(v) -> str:
    """Shortest round-trip decimal form; stable across runs for identical bits."""
    return repr(float(v))


def write_trace_csv(path, trace: np.ndarray):
    trace = np.atleast_2d(np.asarray(trace, dtype=float))
    d = trace.shape[1]
    with open(path, "w") as fh:
        fh.write("t," + ",".join(f"x_{i + 1}" for i in range(d)) + "\n")
        for t, row in enumerate(trace, start=1):
            fh.write(str(t) + "," + ",".join(fmt_float(v) for v in row) + "\n")


def write_acceptance_json(path, stats: AcceptanceStats):
    with open(path, "w") as fh:
        json.dump(stats.as_dict(), fh, sort_keys=True, separators=(",", ":"))
        fh.write("\n")


def worker_count() -> int:
    """Parallelism cap from MOIFORGE_THREADS (default 1 = serial)."""
    raw = os.environ.get("MOIFORGE_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"MOIFORGE_THREADS must be an integer, got {raw!r}")
    return max(1, n)


def parallel_map(fn, items):
    """Order-preserving map, fanned out over at most worker_count() threads.

    Work items must own disjoint RngStreams; results are then identical at
    any thread count.
    """
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=min(n, len(items))) as pool:
        return list(pool.map(fn, items))
