"""Deterministic pseudo-random numbers built on splitmix64.

Everything downstream (synthetic datasets, weight initialization, shuffle
order) draws from this module so that a single integer seed reproduces a
run bit-for-bit. The generator is splitmix64 (Steele, Lea & Flood's
SplittableRandom finalizer) run in counter mode: the j-th output is a pure
function of (seed, j), which keeps the u64 stream portable across
languages and lets us fill arrays without a Python-level loop.

Floating-point derivation:
  uniform in [0, 1):  (u64 >> 11) * 2**-53
  normal:             Box-Muller on uniform pairs, using 1 - u for the
                      log argument so it never sees zero
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_U64_MASK = (1 << 64) - 1


def _finalize(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def splitmix64_block(seed: int, start: int, count: int) -> np.ndarray:
    """Outputs start..start+count-1 of the splitmix64 stream for `seed`."""
    idx = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    states = np.uint64(seed & _U64_MASK) + idx * _GOLDEN
    return _finalize(states)


class SplitMix64:
    """Sequential view of the splitmix64 stream for one seed."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _U64_MASK
        self._consumed = 0

    def _take(self, count: int) -> np.ndarray:
        block = splitmix64_block(self.seed, self._consumed, count)
        self._consumed += count
        return block

    def next_u64(self) -> int:
        return int(self._take(1)[0])

    def uniforms(self, count: int) -> np.ndarray:
        """count doubles in [0, 1)."""
        return (self._take(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normals(self, shape) -> np.ndarray:
        """Standard normal draws via Box-Muller."""
        count = int(np.prod(shape)) if not np.isscalar(shape) else int(shape)
        pairs = (count + 1) // 2
        u = self.uniforms(2 * pairs)
        r = np.sqrt(-2.0 * np.log(1.0 - u[:pairs]))
        theta = 2.0 * np.pi * u[pairs:]
        z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])[:count]
        if np.isscalar(shape):
            return z
        return z.reshape(shape)

    def uniform_open(self, low: float, high: float, shape) -> np.ndarray:
        count = int(np.prod(shape))
        return (low + (high - low) * self.uniforms(count)).reshape(shape)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n) by rejection (no modulo bias)."""
        if n <= 0:
            raise ValueError("randint needs n >= 1")
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def randint_range(self, lo: int, hi: int) -> int:
        """Uniform integer in the inclusive range [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.randint(hi - lo + 1)

    def permutation(self, n: int) -> list[int]:
        """Fisher-Yates shuffle of range(n)."""
        order = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.randint(i + 1)
            order[i], order[j] = order[j], order[i]
        return order
