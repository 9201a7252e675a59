"""Seeded, splittable random streams.

Every stochastic routine in the package draws from an ``Rng``, which wraps a
counter-based Philox generator keyed by a ``(seed, stream)`` pair.  Identical
pairs produce identical draw sequences on any machine and under any thread
placement, which is what makes whole experiment runs byte-reproducible.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
# odd multiplier for deriving child stream ids; any fixed odd constant works
_MIX = 0x9E3779B97F4A7C15


class Rng:
    """A deterministic random stream identified by ``(seed, stream)``."""

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream = int(stream) & _MASK64
        key = np.array([self.seed, self.stream], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"Rng(seed={self.seed}, stream={self.stream})"

    def child(self, tag: int) -> "Rng":
        """Derive an independent stream; same (seed, stream, tag) -> same child."""
        new_stream = ((self.stream * _MIX) + int(tag) + 1) & _MASK64
        return Rng(self.seed, new_stream)

    def standard_normal(self, shape=None) -> np.ndarray:
        return self._gen.standard_normal(size=shape)

    def normal(self, loc: float, scale: float, shape=None) -> np.ndarray:
        return self._gen.normal(loc, scale, size=shape)

    def uniform(self, low: float, high: float, shape=None) -> np.ndarray:
        return self._gen.uniform(low, high, size=shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        """Integers in [low, high), matching numpy's half-open convention."""
        return self._gen.integers(low, high, size=shape)
