"""Portable deterministic randomness for every sampling decision.

A counter-based splitmix stream: output ``i`` is a bijective 64-bit mix of
``seed + (i + 1) * GOLDEN``.  Because each output depends only on the seed
and the draw index, blocks of outputs can be generated fully vectorized and
the sequence is bit-identical on every platform, which is what the
reproducible shot selection and cache generation contracts rely on.
"""

from __future__ import annotations

import math

import numpy as np

GOLDEN = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1
_DERIVE_SALT = 0xD1B54A32D192ED03


def _mix(z: int) -> int:
    """Scalar splitmix64 finalizer on a 64-bit integer."""
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return z ^ (z >> 31)


class SplitMix64:
    """Seeded stream of 64-bit outputs with vectorized block generation."""

    def __init__(self, seed: int):
        self._seed = int(seed) & _MASK
        self._count = 0

    @property
    def seed(self) -> int:
        return self._seed

    def derive(self, tag: int) -> "SplitMix64":
        """Independent child stream; depends only on (seed, tag), never on
        how many draws the parent has made."""
        return SplitMix64(_mix(self._seed ^ _mix((int(tag) & _MASK) ^ _DERIVE_SALT)))

    def raw(self, n: int) -> np.ndarray:
        """Next ``n`` outputs as uint64, generated in one vectorized pass."""
        if n < 0:
            raise ValueError("n must be >= 0")
        idx = np.arange(self._count + 1, self._count + n + 1, dtype=np.uint64)
        self._count += n
        z = np.uint64(self._seed) + idx * np.uint64(GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        return z ^ (z >> np.uint64(31))

    def next_u64(self) -> int:
        self._count += 1
        return _mix((self._seed + self._count * GOLDEN) & _MASK)

    def uniform(self, n: int) -> np.ndarray:
        """n doubles in [0, 1) with 53-bit resolution."""
        return (self.raw(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, n: int) -> np.ndarray:
        """n standard normals via Box-Muller (pairs; odd tail discarded)."""
        m = (n + 1) // 2
        # u1 in (0, 1] keeps log() finite.
        u1 = ((self.raw(m) >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
        u2 = (self.raw(m) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * math.pi * u2
        out = np.empty(2 * m, dtype=np.float64)
        out[0::2] = r * np.cos(theta)
        out[1::2] = r * np.sin(theta)
        return out[:n]

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) via rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates permutation of range(n)."""
        perm = np.arange(n, dtype=np.int64)
        for i in range(n - 1, 0, -1):
            j = self.randbelow(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return perm

    def sample_without_replacement(self, population: int, k: int) -> np.ndarray:
        """k distinct indices from range(population), in draw order."""
        if k > population:
            raise ValueError("k exceeds population")
        pool = np.arange(population, dtype=np.int64)
        for i in range(k):
            j = i + self.randbelow(population - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k].copy()
