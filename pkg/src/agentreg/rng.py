"""Deterministic random number generation.

All stochastic components (Bernoulli query sampling, RANSAC, synthetic data)
draw from an explicitly passed `Rng`. The generator is counter based
(numpy's Philox), so an identical seed plus an identical call sequence
replays bit-exactly on any platform. Derived generators are produced
through `SeedSequence` spawn keys, which lets independent work items
(pairs, epochs, trials) own independent streams without sharing state.
"""

from __future__ import annotations

import numpy as np


class Rng:
    """Seeded counter-based generator with explicit state passing."""

    def __init__(self, seed: int, _key: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._key = tuple(int(k) for k in _key)
        seq = np.random.SeedSequence(self.seed, spawn_key=self._key)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def derive(self, *path: int) -> "Rng":
        """Independent child stream identified by an integer path.

        Children with distinct paths never collide; the same path always
        yields the same stream.
        """
        return Rng(self.seed, self._key + tuple(path))

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def bernoulli(self, p: np.ndarray) -> np.ndarray:
        """One draw per entry of `p`; returns a float64 0/1 array."""
        p = np.asarray(p, dtype=np.float64)
        return (self._gen.uniform(size=p.shape) < p).astype(np.float64)
