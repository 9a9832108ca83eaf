"""PCG32 (XSH-RR 64/32) random streams.

Constants follow the reference C implementation (``pcg32_srandom_r``):
multiplier 6364136223846793005, stream increment ``(initseq << 1) | 1``.
Floats take 53 bits from two consecutive outputs; normals use the cosine
branch of Box-Muller so every normal consumes exactly four outputs.

:class:`Pcg32` is a scalar stream. :class:`Pcg32Array` steps many
independent streams in lock-step with numpy ``uint64`` arithmetic; stream
``k`` of an array produces the same sequence as a scalar stream built
with the same ``(seed, seq)``.
"""
from __future__ import annotations

import math

import numpy as np

MULT = 6364136223846793005
MASK64 = (1 << 64) - 1
MASK32 = (1 << 32) - 1
_TWO_PI = 2.0 * math.pi


def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64_array(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.uint64) + np.uint64(0x9E3779B97F4A7C15)
    z = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, *keys: int) -> int:
    """Mix ``keys`` into ``seed`` one at a time (seed ^ key, then splitmix64)."""
    s = seed & MASK64
    for k in keys:
        s = splitmix64(s ^ (k & MASK64))
    return s


class Pcg32:
    def __init__(self, seed: int, seq: int = 0):
        self.inc = ((seq << 1) | 1) & MASK64
        self.state = 0
        self.next_u32()
        self.state = (self.state + (seed & MASK64)) & MASK64
        self.next_u32()

    def next_u32(self) -> int:
        old = self.state
        self.state = (old * MULT + self.inc) & MASK64
        xorshifted = (((old >> 18) ^ old) >> 27) & MASK32
        rot = old >> 59
        return ((xorshifted >> rot) | (xorshifted << ((-rot) & 31))) & MASK32

    def random(self) -> float:
        """Uniform double in [0, 1) with 53 random bits."""
        a = self.next_u32() >> 5
        b = self.next_u32() >> 6
        return (a * 67108864.0 + b) / 9007199254740992.0

    def uniform(self, lo: float, hi: float) -> float:
        return lo + (hi - lo) * self.random()

    def normal(self) -> float:
        # numpy transcendentals keep scalar and array streams bit-identical
        u = np.array([[self.random()], [self.random()]])
        return float((np.sqrt(-2.0 * np.log(1.0 - u[0])) * np.cos(_TWO_PI * u[1]))[0])

    def bounded(self, bound: int) -> int:
        """Unbiased integer in [0, bound) (rejection as in ``pcg32_boundedrand_r``)."""
        if not 0 < bound <= (1 << 32):
            raise ValueError(f"bound must be in (0, 2**32], got {bound}")
        threshold = ((1 << 32) - bound) % bound
        while True:
            r = self.next_u32()
            if r >= threshold:
                return r % bound

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``0..n-1`` (Durstenfeld, high index down)."""
        perm = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.bounded(i + 1)
            perm[i], perm[j] = perm[j], perm[i]
        return np.array(perm, dtype=np.int64)


class Pcg32Array:
    """Independent PCG32 streams advanced together."""

    def __init__(self, seeds, seq: int = 0):
        seeds = np.atleast_1d(np.asarray(seeds, dtype=np.uint64))
        self.inc = np.uint64(((seq << 1) | 1) & MASK64)
        self.state = np.zeros_like(seeds)
        self.next_u32()
        self.state = self.state + seeds
        self.next_u32()

    def __len__(self) -> int:
        return self.state.size

    def next_u32(self) -> np.ndarray:
        old = self.state
        self.state = old * np.uint64(MULT) + self.inc
        xorshifted = (((old >> np.uint64(18)) ^ old) >> np.uint64(27)) & np.uint64(MASK32)
        rot = old >> np.uint64(59)
        left = (np.uint64(32) - rot) & np.uint64(31)
        return ((xorshifted >> rot) | (xorshifted << left)) & np.uint64(MASK32)

    def random(self) -> np.ndarray:
        a = (self.next_u32() >> np.uint64(5)).astype(np.float64)
        b = (self.next_u32() >> np.uint64(6)).astype(np.float64)
        return (a * 67108864.0 + b) / 9007199254740992.0

    def uniform(self, lo, hi) -> np.ndarray:
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        return lo + (hi - lo) * self.random()

    def normal(self) -> np.ndarray:
        u1 = self.random()
        u2 = self.random()
        return np.sqrt(-2.0 * np.log(1.0 - u1)) * np.cos(_TWO_PI * u2)

    def normals(self, count: int) -> np.ndarray:
        """``count`` normals per stream, shape ``(streams, count)``."""
        out = np.empty((len(self), count))
        for k in range(count):
            out[:, k] = self.normal()
        return out
