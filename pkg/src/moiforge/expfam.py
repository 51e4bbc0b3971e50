"""Exponential families in natural and moment parameterizations.

The moment map sigma(eta) = grad A(eta) = E[s(Z)] links the two coordinate
systems; moment matching (set the moment parameters to the running mean of
sufficient statistics) is the closed-form minimizer of the forward KL and
the workhorse behind the learned independence proposals here.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import IndependenceMHKernel, TargetDensity
from .rng import RngStream

_LOG_PI = math.log(math.pi)

# proposals with (numerically) degenerate variance are refused
VARIANCE_FLOOR = 1e-12


class NaturalDomainError(ValueError):
    """A natural-parameter vector left the family's domain."""


class InfeasibleMomentError(ValueError):
    """Moment vector outside the image of sigma; gather more samples."""


class ExpFamily:
    """Interface: subclasses fix s, A, the domain, and a sampler.

    `natural_from_moments` and `inverse_moment_jacobian` are optional
    closed-form accelerators; moment_to_natural falls back to damped Newton
    when the former is missing.
    """

    name: str = "expfam"
    dim: int = 0       # state dimension
    stat_dim: int = 0  # p, dimension of s(z)

    def suff_stat(self, z: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def log_normalizer(self, eta: np.ndarray) -> float:
        raise NotImplementedError

    def log_base(self, z: np.ndarray) -> float:
        return 0.0

    def in_natural_domain(self, eta: np.ndarray) -> bool:
        raise NotImplementedError

    def moment_map(self, eta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def feasible_moments(self, phi: np.ndarray) -> bool:
        raise NotImplementedError

    def natural_from_moments(self, phi: np.ndarray):
        return None

    def inverse_moment_jacobian(self, phi: np.ndarray):
        """d eta / d phi as a (p, p) matrix, when closed form exists."""
        return None

    def sample(self, eta: np.ndarray, rng: RngStream, size=None) -> np.ndarray:
        raise NotImplementedError

    def log_density(self, z, eta) -> float:
        eta = np.asarray(eta, dtype=float)
        if not self.in_natural_domain(eta):
            raise NaturalDomainError(f"eta outside natural domain: {eta!r}")
        z = np.asarray(z, dtype=float)
        return float(eta @ self.suff_stat(z)) - self.log_normalizer(eta) + self.log_base(z)


class DiagGaussianFamily(ExpFamily):
    """Gaussians with diagonal covariance.

    s(z) = (z_1..z_d, z_1^2..z_d^2); eta = (mu/v, -1/(2v)) per coordinate;
    moments phi = (mu, mu^2 + v). Natural domain: every second-block entry
    negative. Base measure is Lebesgue.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.stat_dim = 2 * dim
        self.name = "diag_gaussian"

    def _split(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape != (self.stat_dim,):
            raise ValueError(f"expected vector of length {self.stat_dim}")
        return v[:self.dim], v[self.dim:]

    def suff_stat(self, z):
        z = np.asarray(z, dtype=float)
        return np.concatenate([z, z * z])

    def in_natural_domain(self, eta):
        _, eta2 = self._split(eta)
        return bool(np.all(eta2 < 0) and np.all(np.isfinite(eta)))

    def log_normalizer(self, eta):
        eta1, eta2 = self._split(eta)
        if np.any(eta2 >= 0):
            raise NaturalDomainError("second natural block must be negative")
        return float(np.sum(-eta1 * eta1 / (4.0 * eta2) + 0.5 * (_LOG_PI - np.log(-eta2))))

    def moment_map(self, eta):
        eta1, eta2 = self._split(eta)
        if np.any(eta2 >= 0):
            raise NaturalDomainError("second natural block must be negative")
        mu = -eta1 / (2.0 * eta2)
        v = -1.0 / (2.0 * eta2)
        return np.concatenate([mu, mu * mu + v])

    def feasible_moments(self, phi):
        m1, m2 = self._split(phi)
        return bool(np.all(np.isfinite(phi)) and np.all(m2 - m1 * m1 > VARIANCE_FLOOR))

    def natural_from_moments(self, phi):
        m1, m2 = self._split(phi)
        v = m2 - m1 * m1
        if np.any(v <= VARIANCE_FLOOR) or not np.all(np.isfinite(phi)):
            raise InfeasibleMomentError(
                "moment vector implies variance below the feasibility floor; "
                "gather more samples")
        return np.concatenate([m1 / v, -1.0 / (2.0 * v)])

    def inverse_moment_jacobian(self, phi):
        m1, m2 = self._split(phi)
        v = m2 - m1 * m1
        if np.any(v <= 0):
            raise InfeasibleMomentError("moment vector infeasible")
        p = self.stat_dim
        J = np.zeros((p, p))
        i = np.arange(self.dim)
        v2 = v * v
        J[i, i] = (v + 2.0 * m1 * m1) / v2          # d eta1 / d m1
        J[i, i + self.dim] = -m1 / v2               # d eta1 / d m2
        J[i + self.dim, i] = -m1 / v2               # d eta2 / d m1
        J[i + self.dim, i + self.dim] = 1.0 / (2.0 * v2)
        return J

    def precondition_solve(self, phi, grad_phi):
        """Solve (d eta/d phi)^T x = grad_phi using the per-coordinate 2x2
        block structure (Cramer); the blocks are symmetric."""
        m1, m2 = self._split(phi)
        g1, g2 = self._split(grad_phi)
        v = m2 - m1 * m1
        v2 = v * v
        a = (v + 2.0 * m1 * m1) / v2
        b = -m1 / v2
        c = 1.0 / (2.0 * v2)
        det = a * c - b * b
        x1 = (c * g1 - b * g2) / det
        x2 = (a * g2 - b * g1) / det
        return np.concatenate([x1, x2])

    def sample(self, eta, rng, size=None):
        eta1, eta2 = self._split(eta)
        mu = -eta1 / (2.0 * eta2)
        sd = np.sqrt(-1.0 / (2.0 * eta2))
        if size is None:
            return mu + sd * rng.normal(size=self.dim)
        return mu + sd * rng.normal(size=(int(size), self.dim))

    def kl_divergence(self, eta_from, eta_to) -> float:
        """KL(f_{eta_from} || f_{eta_to}), closed form."""
        pf = self.moment_map(eta_from)
        m1f, m2f = self._split(pf)
        vf = m2f - m1f * m1f
        pt = self.moment_map(np.asarray(eta_to, dtype=float))
        m1t, m2t = self._split(pt)
        vt = m2t - m1t * m1t
        return float(np.sum(0.5 * (np.log(vt / vf) + (vf + (m1f - m1t) ** 2) / vt - 1.0)))


class KnownVarianceGaussianFamily(ExpFamily):
    """N(eta, I) with the base measure carrying the unit variance.

    s(z) = z, A(eta) = |eta|^2/2, sigma = identity; every moment vector is
    feasible, and the moment-map preconditioner is the identity.
    """

    def __init__(self, dim: int):
        if dim < 1:
            raise ValueError("dim must be >= 1")
        self.dim = dim
        self.stat_dim = dim
        self.name = "known_variance_gaussian"

    def suff_stat(self, z):
        return np.asarray(z, dtype=float).copy()

    def log_base(self, z):
        z = np.asarray(z, dtype=float)
        return float(-0.5 * z @ z - 0.5 * self.dim * math.log(2.0 * math.pi))

    def in_natural_domain(self, eta):
        return bool(np.all(np.isfinite(np.asarray(eta, dtype=float))))

    def log_normalizer(self, eta):
        eta = np.asarray(eta, dtype=float)
        return float(0.5 * eta @ eta)

    def moment_map(self, eta):
        return np.asarray(eta, dtype=float).copy()

    def feasible_moments(self, phi):
        return bool(np.all(np.isfinite(np.asarray(phi, dtype=float))))

    def natural_from_moments(self, phi):
        return np.asarray(phi, dtype=float).copy()

    def inverse_moment_jacobian(self, phi):
        return np.eye(self.dim)

    def precondition_solve(self, phi, grad_phi):
        return np.asarray(grad_phi, dtype=float).copy()

    def sample(self, eta, rng, size=None):
        eta = np.asarray(eta, dtype=float)
        if size is None:
            return eta + rng.normal(size=self.dim)
        return eta + rng.normal(size=(int(size), self.dim))


def diag_gaussian_family(dim: int) -> DiagGaussianFamily:
    return DiagGaussianFamily(dim)


def known_variance_gaussian_family(dim: int) -> KnownVarianceGaussianFamily:
    return KnownVarianceGaussianFamily(dim)


def natural_to_moment(family: ExpFamily, eta) -> np.ndarray:
    return family.moment_map(np.asarray(eta, dtype=float))


def moment_to_natural(family: ExpFamily, phi, eta0=None, tol: float = 1e-10,
                      max_iter: int = 200) -> np.ndarray:
    """Invert the moment map.

    Closed form when the family has one; otherwise damped Newton (step
    halving) on eta -> sigma(eta) - phi, warm-started at eta0.
    """
    phi = np.asarray(phi, dtype=float)
    if not family.feasible_moments(phi):
        raise InfeasibleMomentError(f"infeasible moment vector for {family.name}")
    closed = family.natural_from_moments(phi)
    if closed is not None and eta0 is None:
        return closed
    eta = np.asarray(eta0, dtype=float).copy() if eta0 is not None else None
    if eta is None or not family.in_natural_domain(eta):
        # no usable warm start; fall back to closed form or a crude origin-ish guess
        if closed is not None:
            return closed
        raise NaturalDomainError("Newton inversion needs a feasible warm start")
    scale = 1.0 + float(np.linalg.norm(phi))

    def resid(e):
        return family.moment_map(e) - phi

    r = resid(eta)
    for _ in range(max_iter):
        if np.linalg.norm(r) <= tol * scale:
            return eta
        J = _moment_jacobian_fd(family, eta)
        try:
            delta = np.linalg.solve(J, -r)
        except np.linalg.LinAlgError:
            raise NaturalDomainError("singular moment Jacobian during inversion")
        step = 1.0
        for _ in range(60):
            cand = eta + step * delta
            if family.in_natural_domain(cand):
                cand_r = resid(cand)
                if np.linalg.norm(cand_r) < np.linalg.norm(r):
                    eta, r = cand, cand_r
                    break
            step *= 0.5
        else:
            raise NaturalDomainError("Newton damping failed to make progress")
    raise NaturalDomainError("moment-map inversion did not converge in 200 iterations")


def _moment_jacobian_fd(family: ExpFamily, eta, h: float = 1e-6) -> np.ndarray:
    p = eta.size
    J = np.empty((p, p))
    for j in range(p):
        e = np.zeros(p)
        e[j] = h * max(1.0, abs(eta[j]))
        J[:, j] = (family.moment_map(eta + e) - family.moment_map(eta - e)) / (2 * e[j])
    return J


@dataclass
class SuffStatAccumulator:
    """Running mean of sufficient statistics.

    Summation is Neumaier-compensated (the correction term also catches the
    case where the incoming value dominates the running sum), so the mean
    matches exact arithmetic to well under 10 ulps at any count, including
    under heavy cancellation."""

    stat_dim: int
    family: Optional[ExpFamily] = None
    count: int = 0
    _sum: np.ndarray = field(default=None, repr=False)
    _comp: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self._sum is None:
            self._sum = np.zeros(self.stat_dim)
            self._comp = np.zeros(self.stat_dim)

    def _add(self, s: np.ndarray):
        t = self._sum + s
        sum_dominates = np.abs(self._sum) >= np.abs(s)
        big = np.where(sum_dominates, self._sum, s)
        small = np.where(sum_dominates, s, self._sum)
        self._comp = self._comp + ((big - t) + small)
        self._sum = t

    def update(self, s):
        s = np.asarray(s, dtype=float)
        if s.shape != (self.stat_dim,):
            raise ValueError(f"expected stat vector of length {self.stat_dim}")
        self._add(s)
        self.count += 1

    def update_many(self, stats):
        for row in np.atleast_2d(np.asarray(stats, dtype=float)):
            self.update(row)

    def merge(self, other: "SuffStatAccumulator") -> "SuffStatAccumulator":
        if other.stat_dim != self.stat_dim:
            raise ValueError("accumulator dimension mismatch")
        out = SuffStatAccumulator(self.stat_dim, family=self.family or other.family)
        out._sum = self._sum.copy()
        out._comp = self._comp + other._comp
        out._add(other._sum)
        out.count = self.count + other.count
        return out

    @property
    def mean(self) -> np.ndarray:
        if self.count == 0:
            raise ValueError("no statistics accumulated")
        return (self._sum + self._comp) / self.count


def forward_kl_optimum(accumulated: SuffStatAccumulator,
                       family: Optional[ExpFamily] = None) -> np.ndarray:
    """Moment matching: the accumulated mean IS the forward-KL optimum."""
    fam = family or accumulated.family
    phi = accumulated.mean
    if fam is not None and not fam.feasible_moments(phi):
        raise InfeasibleMomentError(
            "accumulated moments are infeasible (degenerate variance); "
            "gather more samples before building a proposal")
    return phi


def online_update(phi_prev, s_t, t: int) -> np.ndarray:
    """phi_t = phi_{t-1} + (S_t - phi_{t-1})/t."""
    if t < 1:
        raise ValueError("t must be >= 1")
    phi_prev = np.asarray(phi_prev, dtype=float)
    s_t = np.asarray(s_t, dtype=float)
    return phi_prev + (s_t - phi_prev) / t


def naive_sgd_update(eta_prev, s_t, gamma_t: float, family: ExpFamily) -> np.ndarray:
    """One SGD step on the natural-parameter objective; the stochastic
    gradient is sigma(eta) - S_t."""
    eta_prev = np.asarray(eta_prev, dtype=float)
    if not family.in_natural_domain(eta_prev):
        raise NaturalDomainError("eta_prev outside natural domain")
    grad = family.moment_map(eta_prev) - np.asarray(s_t, dtype=float)
    eta_next = eta_prev - gamma_t * grad
    if not family.in_natural_domain(eta_next):
        raise NaturalDomainError(
            f"naive SGD step left the natural domain (gamma={gamma_t})")
    return eta_next


def preconditioned_sgd_update(phi_prev, s_t, gamma_t: float,
                              family: ExpFamily) -> np.ndarray:
    """Moment-space SGD step preconditioned by the transposed inverse-moment
    Jacobian; with gamma_t = 1/t this reproduces online_update."""
    phi_prev = np.asarray(phi_prev, dtype=float)
    eta = moment_to_natural(family, phi_prev)
    grad_moment_space = family.moment_map(eta) - np.asarray(s_t, dtype=float)
    J = family.inverse_moment_jacobian(phi_prev)
    if J is None:
        raise NotImplementedError(f"{family.name} has no closed-form preconditioner")
    grad_phi = J.T @ grad_moment_space
    direction = family.precondition_solve(phi_prev, grad_phi)
    return phi_prev - gamma_t * direction


def imh_kernel(family: ExpFamily, phi, target: TargetDensity) -> IndependenceMHKernel:
    """Independence MH with the family member at moment parameters phi."""
    if family.dim != target.dim:
        raise ValueError("family and target dimension mismatch")
    phi = np.asarray(phi, dtype=float)
    eta = moment_to_natural(family, phi)

    def propose(rng):
        return family.sample(eta, rng)

    def log_proposal(x):
        return family.log_density(x, eta)

    return IndependenceMHKernel(target, propose, log_proposal,
                                name=f"imh[{family.name}]")


def rejection_rate_tv_check(target_probs, proposal_probs):
    """Exact stationary rejection rate and total variation distance on a
    finite space; asserts the rejection bound rr <= 2 tv."""
    p = np.asarray(target_probs, dtype=float)
    q = np.asarray(proposal_probs, dtype=float)
    if p.shape != q.shape or p.ndim != 1:
        raise ValueError("distributions must be same-length vectors")
    for name, v in (("target", p), ("proposal", q)):
        if abs(v.sum() - 1.0) > 1e-12 or np.any(v < 0):
            raise ValueError(f"{name} must be explicitly normalized")
    if np.any(p == 0) or np.any(q == 0):
        raise ValueError("enumeration requires positive supports")
    # E[alpha] at stationarity: current i ~ p, proposal j ~ q
    ratio = np.minimum(1.0, (p[None, :] * q[:, None]) / (p[:, None] * q[None, :]))
    mean_alpha = float(p @ (ratio * q[None, :]).sum(axis=1))
    rr = 1.0 - mean_alpha
    tv = 0.5 * float(np.abs(p - q).sum())
    if rr > 2.0 * tv + 1e-12:
        raise AssertionError(f"rejection-rate bound violated: rr={rr}, 2tv={2 * tv}")
    return rr, tv


@dataclass(frozen=True)
class CurseReport:
    dims: tuple
    median_log_alpha: tuple
    mean_acceptance: tuple
    slope: float
    intercept: float
    r_squared: float


def curse_of_dim_experiment(base_target, base_proposal, dims, rng: RngStream,
                            n_pairs: int = 10000, min_r_squared: float = 0.9) -> CurseReport:
    """Median log acceptance of product-space IMH pairs versus dimension.

    Draws X ~ target^d and Z ~ proposal^d at stationarity and records
    median log alpha per d. For a genuinely mismatched pair the medians must
    decrease approximately linearly in d; violations raise.
    """
    dims = [int(d) for d in dims]
    if any(d < 1 for d in dims):
        raise ValueError("dims must be positive")

    def logpdf_grid(dist, arr):
        out = dist.logpdf(arr)
        if np.shape(out) == arr.shape:
            return np.asarray(out, dtype=float)
        return np.vectorize(dist.logpdf)(arr)

    meds, accs = [], []
    for k, d in enumerate(dims):
        sub = rng.substream(k)
        x = np.asarray(base_target.sample(sub, size=(n_pairs, d)), dtype=float)
        z = np.asarray(base_proposal.sample(sub, size=(n_pairs, d)), dtype=float)
        ell_x = logpdf_grid(base_target, x) - logpdf_grid(base_proposal, x)
        ell_z = logpdf_grid(base_target, z) - logpdf_grid(base_proposal, z)
        s = (ell_z - ell_x).sum(axis=1)
        log_alpha = np.minimum(0.0, s)
        meds.append(float(np.median(log_alpha)))
        accs.append(float(np.mean(np.exp(log_alpha))))
    meds_arr = np.asarray(meds)
    dims_arr = np.asarray(dims, dtype=float)
    slope, intercept = np.polyfit(dims_arr, meds_arr, 1)
    pred = slope * dims_arr + intercept
    ss_res = float(np.sum((meds_arr - pred) ** 2))
    ss_tot = float(np.sum((meds_arr - meds_arr.mean()) ** 2))
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    matched = bool(np.all(np.abs(meds_arr) < 1e-9))
    if not matched:
        diffs = np.diff(meds_arr[np.argsort(dims_arr)])
        if not np.all(diffs < 0):
            raise AssertionError("median log acceptance is not decreasing in d")
        if slope >= 0 or r2 < min_r_squared:
            raise AssertionError(
                f"median log acceptance not approximately linear (slope={slope}, R2={r2})")
    return CurseReport(tuple(dims), tuple(meds), tuple(accs),
                       float(slope), float(intercept), float(r2))


_FAMILIES = {
    "diag_gaussian": DiagGaussianFamily,
    "known_variance_gaussian": KnownVarianceGaussianFamily,
}


def proposal_to_json(family: ExpFamily, phi) -> str:
    payload = {"family_name": family.name, "dim": family.dim,
               "phi": [float(v) for v in np.asarray(phi, dtype=float)]}
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def proposal_from_json(text: str):
    payload = json.loads(text)
    name = payload["family_name"]
    if name not in _FAMILIES:
        raise ValueError(f"unknown family {name!r}")
    family = _FAMILIES[name](int(payload["dim"]))
    phi = np.asarray(payload["phi"], dtype=float)
    if phi.shape != (family.stat_dim,):
        raise ValueError("phi length does not match family")
    return family, phi
