"""Adaptive MCMC with trained transport maps.

A tractable base density pushed through a parametric map provides an
independence proposal; particles alternate between a fixed target-invariant
kernel and that proposal kernel, while the map trains by gradient descent
on the negative average proposal log-density of the current particles.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .core import (IndependenceMHKernel, MarkovKernel, SliceKernel,
                   TargetDensity, fmt_float)
from .optim import DIVERGENCE_NORM
from .rng import RngStream

_LOG_2PI = math.log(2.0 * math.pi)


class TransportError(RuntimeError):
    pass


@dataclass(frozen=True)
class AffineMap:
    """y = mu + diag(s) x with x from a standard normal base.

    params phi = (mu, log s); the pushforward density is the diagonal
    Gaussian N(mu, diag(s^2)).
    """

    dim: int
    phi: np.ndarray

    def __post_init__(self):
        phi = np.asarray(self.phi, dtype=float)
        if phi.shape != (2 * self.dim,):
            raise ValueError(f"phi must have length {2 * self.dim}")
        object.__setattr__(self, "phi", phi.copy())

    @property
    def mu(self) -> np.ndarray:
        return self.phi[:self.dim]

    @property
    def log_s(self) -> np.ndarray:
        return self.phi[self.dim:]

    @property
    def s(self) -> np.ndarray:
        return np.exp(self.log_s)

    def with_params(self, phi) -> "AffineMap":
        return AffineMap(self.dim, np.asarray(phi, dtype=float))

    def forward(self, x) -> np.ndarray:
        return self.mu + self.s * np.asarray(x, dtype=float)

    def inverse(self, y) -> np.ndarray:
        return (np.asarray(y, dtype=float) - self.mu) / self.s

    def log_det_jacobian_inverse(self, y) -> float:
        # diagonal map: independent of y
        return float(-np.sum(self.log_s))

    def log_q(self, y) -> float:
        z = self.inverse(y)
        return float(-0.5 * z @ z - 0.5 * self.dim * _LOG_2PI - np.sum(self.log_s))

    def grad_log_q(self, y) -> np.ndarray:
        """d log q_phi(y) / d phi at fixed y."""
        y = np.asarray(y, dtype=float)
        s = self.s
        r = (y - self.mu) / s
        grad_mu = r / s
        grad_log_s = r * r - 1.0
        return np.concatenate([grad_mu, grad_log_s])

    def base_sample(self, rng: RngStream) -> np.ndarray:
        return rng.normal(size=self.dim)

    def sample(self, rng: RngStream) -> np.ndarray:
        return self.forward(self.base_sample(rng))


def affine_map(dim: int) -> AffineMap:
    """Identity-initialized affine transport map."""
    if dim < 1:
        raise ValueError("dim must be >= 1")
    return AffineMap(dim, np.zeros(2 * dim))


def transport_imh_kernel(tmap: AffineMap, target: TargetDensity) -> IndependenceMHKernel:
    if tmap.dim != target.dim:
        raise ValueError("map and target dimension mismatch")
    return IndependenceMHKernel(target, tmap.sample, tmap.log_q,
                                name="transport_imh")


def transport_loss(tmap: AffineMap, particles: np.ndarray) -> float:
    """Negative mean proposal log-density of the particles."""
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    return -float(np.mean([tmap.log_q(p) for p in particles]))


def transport_loss_grad(tmap: AffineMap, particles: np.ndarray) -> np.ndarray:
    particles = np.atleast_2d(np.asarray(particles, dtype=float))
    total = np.zeros_like(tmap.phi)
    for p in particles:
        total += tmap.grad_log_q(p)
    return -total / particles.shape[0]


@dataclass
class TransportReport:
    particle_trace: np.ndarray      # (k_max+1, N, d)
    loss_trace: np.ndarray          # (k_max,)
    trained_map: AffineMap
    diverged: bool = False
    divergence_k: Optional[int] = None

    @property
    def samples(self) -> np.ndarray:
        k1, n, d = self.particle_trace.shape
        return self.particle_trace.reshape(k1 * n, d)


def adaptive_transport_run(target: TargetDensity, map0: AffineMap,
                           particles0, k_max: int, a: int, eps: float,
                           rng: RngStream,
                           fixed_kernel: Optional[MarkovKernel] = None) -> TransportReport:
    """Alternating-kernel particle scheme with per-sweep map training.

    Sweep k updates every particle with the transport proposal kernel when
    k mod (a+1) == 0, else with the fixed target-invariant kernel; then the
    map takes one descent step on the particle log-loss. eps = 0 freezes
    the map. A non-finite loss raises naming the sweep; a runaway parameter
    norm stops the run and flags the report.
    """
    if a < 1:
        raise ValueError("a must be >= 1")
    if eps < 0:
        raise ValueError("eps must be >= 0")
    particles = np.atleast_2d(np.asarray(particles0, dtype=float)).copy()
    n, d = particles.shape
    if n < 2:
        raise ValueError("need at least 2 particles")
    if d != target.dim:
        raise ValueError("particle dimension mismatch")
    if fixed_kernel is None:
        fixed_kernel = SliceKernel(target, width=2.0)
    tmap = map0
    streams = [rng.substream(i) for i in range(n)]
    trace = np.empty((k_max + 1, n, d))
    trace[0] = particles
    losses = np.empty(k_max)
    for k in range(k_max):
        if k % (a + 1) == 0:
            kernel = transport_imh_kernel(tmap, target)
        else:
            kernel = fixed_kernel
        for i in range(n):
            particles[i] = kernel.step(particles[i], streams[i])
        loss = transport_loss(tmap, particles)
        if not math.isfinite(loss):
            raise TransportError(f"non-finite training loss at sweep {k}")
        losses[k] = loss
        if eps > 0:
            grad = transport_loss_grad(tmap, particles)
            tmap = tmap.with_params(tmap.phi - eps * grad)
        trace[k + 1] = particles
        if float(np.linalg.norm(tmap.phi)) > DIVERGENCE_NORM:
            return TransportReport(trace[:k + 2].copy(), losses[:k + 1].copy(),
                                   tmap, True, k)
    return TransportReport(trace, losses, tmap)


def map_to_json(tmap: AffineMap) -> str:
    payload = {"kind": "affine", "dim": tmap.dim,
               "phi": [float(v) for v in tmap.phi]}
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def map_from_json(text: str) -> AffineMap:
    payload = json.loads(text)
    if payload.get("kind") != "affine":
        raise ValueError("unknown map kind")
    return AffineMap(int(payload["dim"]), np.asarray(payload["phi"], dtype=float))


def write_particle_csv(path, report: TransportReport, stride: int = 1):
    k1, n, d = report.particle_trace.shape
    with open(path, "w") as fh:
        fh.write("k,n," + ",".join(f"x_{i + 1}" for i in range(d)) + "\n")
        for k in range(0, k1, stride):
            for i in range(n):
                fh.write(f"{k},{i}," +
                         ",".join(fmt_float(v) for v in report.particle_trace[k, i]) + "\n")


def write_loss_csv(path, report: TransportReport):
    with open(path, "w") as fh:
        fh.write("k,loss\n")
        for k, v in enumerate(report.loss_trace):
            fh.write(f"{k},{fmt_float(v)}\n")
