"""Portable xoshiro256** generator (seeded through splitmix64).

Pure integer arithmetic, so streams are identical on every platform. Floats
take the top 53 bits; normals use Box-Muller.
"""

from __future__ import annotations

import math

import numpy as np

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    def __init__(self, seed: int, *stream: int):
        sm = seed & MASK64
        # fold extra stream keys (frame index, purpose tag, ...) into the seed
        for key in stream:
            sm, mixed = splitmix64(sm ^ (key & MASK64))
            sm = mixed
        s = []
        for _ in range(4):
            sm, z = splitmix64(sm)
            s.append(z)
        if not any(s):
            s[0] = 1
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def random(self) -> float:
        """Uniform double in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def uniform(self, lo: float = 0.0, hi: float = 1.0, size: int | tuple | None = None):
        if size is None:
            return lo + (hi - lo) * self.random()
        n = int(np.prod(size))
        vals = np.array([self.random() for _ in range(n)])
        return (lo + (hi - lo) * vals).reshape(size)

    def normal(self, size: int | tuple | None = None, std: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n + (n & 1))
        for i in range(0, len(out), 2):
            u1 = 1.0 - self.random()  # (0, 1]
            u2 = self.random()
            r = math.sqrt(-2.0 * math.log(u1))
            out[i] = r * math.cos(2.0 * math.pi * u2)
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        out = out[:n] * std
        return float(out[0]) if size is None else out.reshape(size)

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of range(n)."""
        a = list(range(n))
        for i in range(n - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            a[i], a[j] = a[j], a[i]
        return np.array(a, dtype=np.int64)
