"""SplitMix64-seeded xoshiro256++, so synthetic data is identical on every platform.

Seeding: the 256-bit state is the first four SplitMix64 outputs for the
given 64-bit seed. Floats use the top 53 bits (``(x >> 11) * 2**-53``);
normals use Box-Muller on two consecutive uniforms and consume both.

Reference vectors (checked in the tests):

* SplitMix64, seed 0: 0xe220a8397b1dcdaf, 0x6e789e6aa1b965f4, 0x06c45d188009454f
* xoshiro256++, state (1, 2, 3, 4): 41943041, 58720359, 3588806011781223,
  3591011842654386, 9228616714210784205, 9973669472204895162
"""
from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)


class Xoshiro256pp:
    def __init__(self, seed: int = 0, state=None):
        if state is not None:
            s = [int(v) & MASK64 for v in state]
            if len(s) != 4 or not any(s):
                raise ValueError("state must be four words, not all zero")
        else:
            sm = SplitMix64(seed)
            s = [sm.next() for _ in range(4)]
        self.s = s

    def next(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s0 + s3) & MASK64, 23) + s0) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random_raw(self, n: int) -> list:
        return [self.next() for _ in range(n)]

    def random(self, size: int | None = None):
        """Uniform double(s) in [0, 1)."""
        if size is None:
            return (self.next() >> 11) * (1.0 / 9007199254740992.0)
        return np.array([(self.next() >> 11) for _ in range(size)], dtype=np.float64) * (1.0 / 9007199254740992.0)

    def uniform(self, low: float = 0.0, high: float = 1.0, size: int | None = None):
        return low + (high - low) * self.random(size)

    def standard_normal(self, size: int | None = None):
        n = 1 if size is None else size
        out = np.empty(n)
        for i in range(n):
            u1 = 1.0 - self.random()  # (0, 1]
            u2 = self.random()
            out[i] = math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)
        return float(out[0]) if size is None else out

    def permutation(self, n: int) -> list:
        """Fisher-Yates shuffle of ``range(n)``; indices by 32-bit multiply-shift (bias below 2**-20 for small n)."""
        items = list(range(n))
        for i in range(n - 1, 0, -1):
            j = (self.next() >> 32) * (i + 1) >> 32
            items[i], items[j] = items[j], items[i]
        return items
