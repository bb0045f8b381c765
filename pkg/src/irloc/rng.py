"""Portable seeded PRNG used wherever reproducibility across implementations matters.

The generator is xorshift64* (shifts 12, 25, 27; multiplier 0x2545F4914F6CDD1D).
The 64-bit state is initialised from the integer seed with one splitmix64 step
(increment 0x9E3779B97F4A7C15, mixers 0xBF58476D1CE4E5B9 and 0x94D049BB133111EB),
so seed 0 is valid. Uniform floats take the top 53 bits of an output.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
XORSHIFT_MULT = 0x2545F4914F6CDD1D


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


class XorShift64Star:
    def __init__(self, seed: int):
        state = splitmix64(int(seed) & MASK64)
        self.state = state if state != 0 else 0x9E3779B97F4A7C15

    def next_u64(self) -> int:
        x = self.state
        x ^= x >> 12
        x ^= (x << 25) & MASK64
        x ^= x >> 27
        self.state = x
        return (x * XORSHIFT_MULT) & MASK64

    def uniform(self) -> float:
        """Float in [0, 1)."""
        return (self.next_u64() >> 11) * (1.0 / 9007199254740992.0)

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("randbelow needs n > 0")
        # rejection sampling keeps the draw unbiased
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            r = self.next_u64()
            if r < limit:
                return r % n

    def sample(self, n: int, k: int) -> np.ndarray:
        """k distinct indices from range(n), partial Fisher-Yates order."""
        if k > n:
            raise ValueError("sample larger than population")
        pool = list(range(n)) if n <= 4 * k or n < 64 else None
        if pool is not None:
            for i in range(k):
                j = i + self.randbelow(n - i)
                pool[i], pool[j] = pool[j], pool[i]
            return np.array(pool[:k], dtype=np.int64)
        # sparse swap table for large populations
        swaps: dict[int, int] = {}
        out = np.empty(k, dtype=np.int64)
        for i in range(k):
            j = i + self.randbelow(n - i)
            vi = swaps.get(i, i)
            vj = swaps.get(j, j)
            swaps[j] = vi
            out[i] = vj
        return out

    def spawn_seed(self) -> int:
        return self.next_u64()
