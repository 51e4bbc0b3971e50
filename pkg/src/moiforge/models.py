"""Concrete targets: the constrained Wright-Fisher bridge posterior, product
densities for scaling studies, Gaussian building blocks, and small discrete
targets that support exact-enumeration oracles."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict, replace
from typing import Optional

import numpy as np

from .core import TargetDensity

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class Gaussian1D:
    mean: float = 0.0
    sd: float = 1.0

    def __post_init__(self):
        if self.sd <= 0:
            raise ValueError("sd must be positive")

    def logpdf(self, x: float) -> float:
        z = (x - self.mean) / self.sd
        return -0.5 * z * z - math.log(self.sd) - 0.5 * _LOG_2PI

    def sample(self, rng, size=None):
        return self.mean + self.sd * rng.normal(size=size)


@dataclass(frozen=True)
class GaussianMixture1D:
    """Two-or-more component scalar Gaussian mixture."""

    weights: tuple
    means: tuple
    sds: tuple

    def __post_init__(self):
        if not (len(self.weights) == len(self.means) == len(self.sds)):
            raise ValueError("weights/means/sds length mismatch")
        if abs(sum(self.weights) - 1.0) > 1e-12:
            raise ValueError("weights must sum to 1")
        if any(s <= 0 for s in self.sds):
            raise ValueError("sds must be positive")

    def logpdf(self, x: float) -> float:
        terms = [
            math.log(w) - 0.5 * ((x - m) / s) ** 2 - math.log(s) - 0.5 * _LOG_2PI
            for w, m, s in zip(self.weights, self.means, self.sds)
        ]
        top = max(terms)
        if top == -math.inf:
            return -math.inf
        return top + math.log(sum(math.exp(t - top) for t in terms))

    def sample(self, rng, size=None):
        if size is None:
            k = rng.choice(len(self.weights), p=np.asarray(self.weights))
            return self.means[k] + self.sds[k] * rng.normal()
        return np.array([self.sample(rng) for _ in range(int(size))])

    def mean(self) -> float:
        return sum(w * m for w, m in zip(self.weights, self.means))

    def variance(self) -> float:
        m = self.mean()
        second = sum(w * (s * s + mu * mu) for w, s, mu in
                     zip(self.weights, self.sds, self.means))
        return second - m * m


def scalar_target(dist, name: str = "") -> TargetDensity:
    """Wrap a scalar distribution (logpdf over floats) as a dim-1 target."""
    return TargetDensity(lambda x: dist.logpdf(float(x[0])), dim=1,
                         name=name or type(dist).__name__)


def product_target(base, d: int, name: str = "") -> TargetDensity:
    """Independent product of d copies of a scalar density.

    `base` needs a logpdf(float) method. The per-coordinate terms are exposed
    as components, so component_count == d and their sum is the log-density.
    """
    if d < 1:
        raise ValueError("d must be >= 1")
    logpdf = base.logpdf

    def log_density(z):
        return float(sum(logpdf(float(v)) for v in z))

    comps = tuple((lambda z, i=i: logpdf(float(z[i]))) for i in range(d))
    return TargetDensity(log_density, dim=d, components=comps,
                         name=name or f"product^{d}")


# -- Wright-Fisher bridge ---------------------------------------------------


@dataclass(frozen=True)
class WrightFisherBridge:
    """Discretized Wright-Fisher diffusion pushed through a projection, with
    an anchor observation and a forbidden band on part of the path.

    The latent z is standard normal in R^dim; the path is
    X_i = proj_[0,1](X_{i-1} + sqrt(delta X_{i-1}(1-X_{i-1})) z_i) from
    X_0 = x_init. Anchor and band values below are this artifact's defaults;
    the anchor likelihood is Gaussian with sd obs_sd, and the band is a hard
    constraint unless soft_constraint_scale is set, in which case excursions
    into the band are penalized quadratically instead.
    """

    dim: int = 20
    delta: float = 0.05
    x_init: float = 0.5
    anchor_index: Optional[int] = 20
    anchor_value: float = 0.5
    anchor_sd: float = 0.05
    forbidden_lo: float = 0.6
    forbidden_hi: float = 0.9
    forbidden_start: int = 7
    forbidden_end: int = 13
    soft_constraint_scale: Optional[float] = None

    def __post_init__(self):
        if not (0.0 < self.x_init < 1.0):
            raise ValueError("x_init must lie in (0,1)")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.anchor_index is not None and not (1 <= self.anchor_index <= self.dim):
            raise ValueError("anchor_index out of range")


def wf_forward(z, model: WrightFisherBridge) -> np.ndarray:
    """Map latent z to the path (X_1, ..., X_dim)."""
    z = np.asarray(z, dtype=float)
    if z.shape != (model.dim,):
        raise ValueError(f"z must have shape ({model.dim},)")
    path = np.empty(model.dim)
    x = model.x_init
    for i in range(model.dim):
        x = x + math.sqrt(model.delta * x * (1.0 - x)) * z[i]
        x = min(1.0, max(0.0, x))
        path[i] = x
    return path


def wf_log_target(z, model: WrightFisherBridge) -> float:
    z = np.asarray(z, dtype=float)
    lp = float(-0.5 * np.dot(z, z) - 0.5 * model.dim * _LOG_2PI)
    path = wf_forward(z, model)
    if model.anchor_index is not None:
        resid = (path[model.anchor_index - 1] - model.anchor_value) / model.anchor_sd
        lp += -0.5 * resid * resid - math.log(model.anchor_sd) - 0.5 * _LOG_2PI
    if model.forbidden_lo is not None and model.forbidden_hi is not None:
        band = path[model.forbidden_start - 1:model.forbidden_end]
        inside = (band > model.forbidden_lo) & (band < model.forbidden_hi)
        if model.soft_constraint_scale is None:
            if bool(np.any(inside)):
                return -math.inf
        else:
            # squared excursion depth past the nearest band edge
            depth = np.minimum(band - model.forbidden_lo, model.forbidden_hi - band)
            lp -= model.soft_constraint_scale * float(np.sum((depth * inside) ** 2))
    return lp


def wf_target(model: WrightFisherBridge) -> TargetDensity:
    """Fused single-pass evaluation; agrees with wf_log_target up to
    float summation order (~1e-14), including the hard-band verdicts.

    Slice sweeps spend nearly all their time in this function, so the model
    fields are hoisted into the closure and the path is never materialized.
    """
    dim = model.dim
    delta = model.delta
    x_init = model.x_init
    anchor_i = None if model.anchor_index is None else model.anchor_index - 1
    anchor_value, anchor_sd = model.anchor_value, model.anchor_sd
    anchor_const = -math.log(anchor_sd) - 0.5 * _LOG_2PI
    has_band = model.forbidden_lo is not None and model.forbidden_hi is not None
    lo, hi = model.forbidden_lo, model.forbidden_hi
    band_from, band_to = model.forbidden_start - 1, model.forbidden_end - 1
    soft = model.soft_constraint_scale
    prior_const = -0.5 * dim * _LOG_2PI

    def log_density(z) -> float:
        quad = 0.0
        x = x_init
        penalty = 0.0
        anchor_term = 0.0
        for i in range(dim):
            zi = float(z[i])
            quad += zi * zi
            x = x + math.sqrt(delta * x * (1.0 - x)) * zi
            if x > 1.0:
                x = 1.0
            elif x < 0.0:
                x = 0.0
            if has_band and band_from <= i <= band_to and lo < x < hi:
                if soft is None:
                    return -math.inf
                depth = min(x - lo, hi - x)
                penalty += depth * depth
            if i == anchor_i:
                resid = (x - anchor_value) / anchor_sd
                anchor_term = -0.5 * resid * resid + anchor_const
        lp = -0.5 * quad + prior_const + anchor_term
        if soft is not None:
            lp -= soft * penalty
        return lp

    return TargetDensity(log_density, dim=dim, name="wright_fisher_bridge")


def wf_path_log_density(x, model: WrightFisherBridge) -> float:
    """Joint log-density of the path variables (X_1, ..., X_dim) themselves.

    Same generative model as wf_log_target, but parameterized by the path
    rather than the latent increments: Gaussian transition terms with
    state-dependent variance delta X(1-X), plus the anchor and band terms.
    Support is the open cube (0,1)^dim; the projection's boundary atoms
    carry no interior mass.
    """
    x = np.asarray(x, dtype=float)
    if x.shape != (model.dim,):
        raise ValueError(f"x must have shape ({model.dim},)")
    if np.any(x <= 0.0) or np.any(x >= 1.0):
        return -math.inf
    lp = 0.0
    if model.forbidden_lo is not None and model.forbidden_hi is not None:
        band = x[model.forbidden_start - 1:model.forbidden_end]
        inside = (band > model.forbidden_lo) & (band < model.forbidden_hi)
        if model.soft_constraint_scale is None:
            if bool(np.any(inside)):
                return -math.inf
        else:
            depth = np.minimum(band - model.forbidden_lo, model.forbidden_hi - band)
            lp -= model.soft_constraint_scale * float(np.sum((depth * inside) ** 2))
    prev = np.concatenate(([model.x_init], x[:-1]))
    var = model.delta * prev * (1.0 - prev)
    resid = x - prev
    lp += float(-0.5 * np.sum(resid * resid / var + np.log(var)) - 0.5 * model.dim * _LOG_2PI)
    if model.anchor_index is not None:
        resid_a = (x[model.anchor_index - 1] - model.anchor_value) / model.anchor_sd
        lp += -0.5 * resid_a * resid_a - math.log(model.anchor_sd) - 0.5 * _LOG_2PI
    return lp


def wf_path_target(model: WrightFisherBridge) -> TargetDensity:
    return TargetDensity(lambda x: wf_path_log_density(x, model),
                         dim=model.dim, name="wright_fisher_path")


_WF_FIELDS = {f: None for f in (
    "dim", "delta", "x_init", "anchor_index", "anchor_value", "anchor_sd",
    "forbidden_lo", "forbidden_hi", "forbidden_start", "forbidden_end",
    "soft_constraint_scale")}


def wf_from_config(cfg: dict) -> WrightFisherBridge:
    unknown = set(cfg) - set(_WF_FIELDS)
    if unknown:
        raise ValueError(f"unknown Wright-Fisher config keys: {sorted(unknown)}")
    return replace(WrightFisherBridge(), **cfg)


def wf_to_config(model: WrightFisherBridge) -> dict:
    return asdict(model)


def write_path_csv(path_file, path_values):
    from .core import fmt_float
    with open(path_file, "w") as fh:
        fh.write("i,x_i\n")
        for i, v in enumerate(np.asarray(path_values, dtype=float), start=1):
            fh.write(f"{i},{fmt_float(v)}\n")


# -- discrete targets for exact oracles ------------------------------------


def _validate_probs(p, what: str) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1 or p.size < 2 or p.size > 16:
        raise ValueError(f"{what} must be a vector over 2..16 states")
    if np.any(p < 0):
        raise ValueError(f"{what} entries must be nonnegative")
    if abs(p.sum() - 1.0) > 1e-12:
        raise ValueError(f"{what} must sum to 1 within 1e-12")
    return p


def discrete_transition_oracle(target_probs, proposal_probs) -> np.ndarray:
    """Exact independence-MH transition matrix on a finite state space.

    P[i, j] = proposal[j] * min(1, (target[j] proposal[i]) / (target[i] proposal[j]))
    off the diagonal, rest on it. Supports must be positive.
    """
    p = _validate_probs(target_probs, "target")
    q = _validate_probs(proposal_probs, "proposal")
    if p.shape != q.shape:
        raise ValueError("target and proposal must have the same state count")
    if np.any(p == 0) or np.any(q == 0):
        raise ValueError("oracle requires strictly positive supports")
    n = p.size
    P = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            alpha = min(1.0, (p[j] * q[i]) / (p[i] * q[j]))
            P[i, j] = q[j] * alpha
        P[i, i] = 1.0 - P[i].sum()
    return P


def stationary_distribution(P: np.ndarray, tol: float = 1e-12,
                            max_iter: int = 100000) -> np.ndarray:
    """Stationary row vector of a stochastic matrix by power iteration."""
    P = np.asarray(P, dtype=float)
    n = P.shape[0]
    pi = np.full(n, 1.0 / n)
    for _ in range(max_iter):
        nxt = pi @ P
        if np.abs(nxt - pi).sum() < tol:
            return nxt / nxt.sum()
        pi = nxt
    raise RuntimeError("power iteration did not converge")


def discrete_target(probs, name: str = "discrete") -> TargetDensity:
    """Finite target over integer states, state encoded as a length-1 array."""
    p = _validate_probs(probs, "target")
    logp = np.where(p > 0, np.log(np.where(p > 0, p, 1.0)), -np.inf)

    def log_density(x):
        i = int(round(float(x[0])))
        if i < 0 or i >= p.size:
            return -math.inf
        return float(logp[i])

    return TargetDensity(log_density, dim=1, name=name)
