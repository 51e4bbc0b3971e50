"""Stochastic gradient estimators.

No automatic differentiation anywhere: every objective supplies analytic
gradients, and the test problems cross-check them against central finite
differences. All estimators are pure given an RngStream.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .core import fmt_float
from .rng import RngStream


class EstimatorError(RuntimeError):
    pass


@dataclass(frozen=True)
class GradientEstimate:
    value: np.ndarray
    samples_used: int
    estimator_name: str
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "value", np.atleast_1d(np.asarray(self.value, dtype=float)))
        if not np.all(np.isfinite(self.value)):
            raise EstimatorError(f"non-finite gradient estimate from {self.estimator_name}")

    @property
    def meta(self) -> dict:
        return {"samples_used": self.samples_used,
                "estimator_name": self.estimator_name}


@dataclass(frozen=True)
class ReparamObjective:
    """Objective f(x, phi) with a pushforward map m_phi(eps, phi).

    grad_x_f / grad_phi_f: analytic partials of f.
    m_phi_vjp(eps, phi, v): (d m_phi / d phi)^T v, evaluated at eps.
    base_sampler(rng): one draw from the fixed base distribution.
    """

    f: Callable
    grad_x_f: Callable
    grad_phi_f: Callable
    m_phi: Callable
    m_phi_vjp: Callable
    base_sampler: Callable


@dataclass(frozen=True)
class ScoreModel:
    """Sampler plus analytic score, as REINFORCE needs."""

    sampler: Callable            # (phi, rng) -> x
    grad_log_density: Callable   # (x, phi) -> vector
    log_density: Optional[Callable] = None


def _check_finite(vec, t, name):
    vec = np.atleast_1d(np.asarray(vec, dtype=float))
    if not np.all(np.isfinite(vec)):
        raise EstimatorError(f"{name}: non-finite gradient at sample {t}")
    return vec


def reparam_gradient(obj: ReparamObjective, phi, T: int, rng: RngStream) -> GradientEstimate:
    """Pathwise estimator: average of d/dphi f(m_phi(eps), phi) over T base draws."""
    if T < 1:
        raise ValueError("T must be >= 1")
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    total = None
    for t in range(T):
        eps = obj.base_sampler(rng)
        x = obj.m_phi(eps, phi)
        gx = np.atleast_1d(np.asarray(obj.grad_x_f(x, phi), dtype=float))
        term = np.atleast_1d(np.asarray(obj.m_phi_vjp(eps, phi, gx), dtype=float)) \
            + np.atleast_1d(np.asarray(obj.grad_phi_f(x, phi), dtype=float))
        term = _check_finite(term, t, "reparam")
        total = term if total is None else total + term
    return GradientEstimate(total / T, T, "reparam")


def reinforce_gradient(f: Callable, family: ScoreModel, phi, T: int, rng: RngStream,
                       grad_phi_f: Optional[Callable] = None) -> GradientEstimate:
    """Score-function estimator: average of grad_phi f + f * score.

    grad_phi_f is the analytic partial of f in phi holding x fixed; omit it
    when f does not depend on phi.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    total = None
    for t in range(T):
        x = family.sampler(phi, rng)
        score = np.atleast_1d(np.asarray(family.grad_log_density(x, phi), dtype=float))
        fx = float(f(x, phi))
        term = fx * score
        if grad_phi_f is not None:
            term = term + np.atleast_1d(np.asarray(grad_phi_f(x, phi), dtype=float))
        term = _check_finite(term, t, "reinforce")
        total = term if total is None else total + term
    return GradientEstimate(total / T, T, "reinforce")


def control_variate(g_hat, c_hat, c_mean) -> GradientEstimate:
    """Correct paired samples of g with a control c of known mean.

    k-star is the plug-in -cov(g, c)/var(c) per coordinate, estimated from
    the same samples that form the estimate; extras report the estimated
    variance reduction factor 1 - corr^2 per coordinate.
    """
    g = np.atleast_2d(np.asarray(g_hat, dtype=float))
    c = np.atleast_2d(np.asarray(c_hat, dtype=float))
    if g.ndim == 2 and g.shape[0] == 1 and np.asarray(g_hat).ndim == 1:
        g, c = g.T, c.T
    if g.shape != c.shape:
        raise ValueError("g and c sample arrays must have identical shape")
    n, m = g.shape
    if n < 2:
        raise ValueError("need at least 2 paired samples")
    c_mean = np.broadcast_to(np.asarray(c_mean, dtype=float), (m,))
    gc = g - g.mean(axis=0)
    cc = c - c.mean(axis=0)
    var_c = (cc * cc).sum(axis=0) / (n - 1)
    cov = (gc * cc).sum(axis=0) / (n - 1)
    var_g = (gc * gc).sum(axis=0) / (n - 1)
    zero_var = var_c == 0.0
    k = np.where(zero_var, 0.0, -cov / np.where(zero_var, 1.0, var_c))
    corrected = g + k[None, :] * (c - c_mean[None, :])
    with np.errstate(invalid="ignore", divide="ignore"):
        corr2 = np.where((var_g > 0) & (var_c > 0), cov * cov / (var_g * var_c), 0.0)
    extras = {
        "k_star": k.copy(),
        "variance_factor": 1.0 - corr2,
        "corrected_samples": corrected,
        "zero_variance_control": bool(np.any(zero_var)),
    }
    return GradientEstimate(corrected.mean(axis=0), n, "control_variate", extras)


def rao_blackwellize(g: Optional[Callable], conditional_mean: Callable,
                     x1_samples: Sequence, phi,
                     x2_samples: Optional[Sequence] = None) -> GradientEstimate:
    """Average the exact conditional expectation over the nuisance coordinate.

    When the raw map g and matching x2 draws are supplied, the raw estimate
    on the same joint draws is reported alongside so callers can verify the
    variance never increases.
    """
    x1_samples = list(x1_samples)
    if not x1_samples:
        raise ValueError("need at least one x1 sample")
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    vals = np.asarray([np.atleast_1d(np.asarray(conditional_mean(x1, phi), dtype=float))
                       for x1 in x1_samples])
    extras = {}
    if g is not None and x2_samples is not None:
        x2_samples = list(x2_samples)
        if len(x2_samples) != len(x1_samples):
            raise ValueError("x1 and x2 sample counts must match")
        raw = np.asarray([np.atleast_1d(np.asarray(g((x1, x2), phi), dtype=float))
                          for x1, x2 in zip(x1_samples, x2_samples)])
        extras["raw_mean"] = raw.mean(axis=0)
        extras["raw_variance"] = raw.var(axis=0, ddof=1) if len(raw) > 1 else np.zeros(raw.shape[1])
        extras["rb_variance"] = vals.var(axis=0, ddof=1) if len(vals) > 1 else np.zeros(vals.shape[1])
    return GradientEstimate(vals.mean(axis=0), len(x1_samples), "rao_blackwell", extras)


def minibatch_gradient(components: Sequence[Callable], batch_size: int,
                       rng: RngStream, phi=None) -> GradientEstimate:
    """Uniform without-replacement subsample of component gradients,
    rescaled by N/B so the full-sum gradient is recovered in expectation."""
    n = len(components)
    if not 1 <= batch_size <= n:
        raise ValueError(f"batch_size must be in [1, {n}]")
    idx = rng.permutation(n)[:batch_size]
    total = None
    for i in idx:
        gi = np.atleast_1d(np.asarray(components[int(i)](phi), dtype=float))
        gi = _check_finite(gi, int(i), "minibatch")
        total = gi if total is None else total + gi
    value = (n / batch_size) * total
    return GradientEstimate(value, batch_size, "minibatch", {"indices": np.sort(idx)})


def central_difference(fn: Callable, phi, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of phi."""
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    out = np.empty_like(phi)
    for j in range(phi.size):
        e = np.zeros_like(phi)
        e[j] = h
        out[j] = (float(fn(phi + e)) - float(fn(phi - e))) / (2 * h)
    return out


def write_estimator_csv(path, rows):
    """Benchmark report rows: (estimator, problem, T, mean_err, variance)."""
    with open(path, "w") as fh:
        fh.write("estimator,problem,T,mean_err,variance\n")
        for est, prob, T, err, var in rows:
            fh.write(f"{est},{prob},{int(T)},{fmt_float(err)},{fmt_float(var)}\n")
