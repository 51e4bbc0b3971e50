"""Deterministic random streams.

Every stochastic routine in this package takes an explicit RngStream. A
stream is identified by (seed, stream_id) and is backed by a counter-based
generator, so the sequence it produces depends only on that pair and on the
number of values drawn so far, never on global state or draw interleaving
across streams. Child streams are derived by hashing, which lets a driver
hand disjoint streams to chains, replicas, particles, or repetitions and
reproduce any one of them in isolation.
"""
from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
# splitmix64 increment and mixing constants (Steele et al. finalizer).
_GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB


def splitmix64(x: int) -> int:
    """One splitmix64 finalizer round of the 64-bit integer x."""
    x = (x + _GOLDEN) & _MASK64
    x = ((x ^ (x >> 30)) * _MIX1) & _MASK64
    x = ((x ^ (x >> 27)) * _MIX2) & _MASK64
    return x ^ (x >> 31)


class RngStream:
    """A named substream of the package-wide random source.

    Wraps numpy's Philox generator keyed by (seed, stream_id). Draw methods
    count how many variates they produced (`n_draws`), which makes "same
    seed, same stream, same draw sequence" checkable in tests.

    Streams are single-owner: hand a substream to exactly one consumer and
    never share one across threads.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))
        self.n_draws = 0

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def _count(self, size) -> int:
        if size is None:
            return 1
        return int(np.prod(size))

    def uniform(self, size=None):
        """U(0,1) draws."""
        self.n_draws += self._count(size)
        return self._gen.random(size)

    def normal(self, size=None):
        """Standard normal draws."""
        self.n_draws += self._count(size)
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        self.n_draws += self._count(size)
        return self._gen.integers(low, high, size=size)

    def choice(self, n: int, p=None):
        """One index in range(n), optionally weighted. Inverse-CDF over a
        single uniform so the draw count stays predictable."""
        u = self.uniform()
        if p is None:
            return min(int(u * n), n - 1)
        edges = np.cumsum(p)
        if abs(edges[-1] - 1.0) > 1e-9:
            raise ValueError("weights must sum to 1")
        return int(np.searchsorted(edges, u, side="right").clip(0, n - 1))

    def permutation(self, n: int):
        self.n_draws += n
        return self._gen.permutation(n)

    def substream(self, index: int) -> "RngStream":
        """Derive the index-th child stream.

        The child's stream_id mixes this stream's id with the index through
        splitmix64, so substream trees rooted at different ids stay disjoint
        (up to 64-bit hash collisions, which at the stream counts used here
        are negligible).
        """
        child_id = splitmix64(self.stream_id ^ splitmix64((index + 1) & _MASK64))
        return RngStream(self.seed, child_id)

    def spawn(self, n: int) -> list["RngStream"]:
        return [self.substream(i) for i in range(n)]
