"""SplitMix64, the generator behind every prompt-sampling decision.

Chosen because it is tiny, has a 64-bit seed and a published reference
(Steele, Lea & Flood 2014; the C reference at prng.di.unimi.it), so the
exact output sequence can be reproduced in any language:

    state += 0x9E3779B97F4A7C15
    z = state
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
    z = (z ^ (z >> 27)) * 0x94D049BB133111EB
    return z ^ (z >> 31)                      (all arithmetic mod 2**64)

``bounded(n)`` draws a uniform integer in [0, n) by rejection: values below
``(2**64 - n) % n`` are discarded, the rest are reduced mod n.

Reference vectors (seed 1234567, first five outputs) are pinned in
``tests/test_rng.py``.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1
GOLDEN_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + GOLDEN_GAMMA) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def bounded(self, n: int) -> int:
        if n <= 0:
            raise ValueError("bound must be positive")
        threshold = ((1 << 64) - n) % n
        while True:
            r = self.next_u64()
            if r >= threshold:
                return r % n

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def sample_indices(self, n: int, k: int) -> list[int]:
        """k distinct indices from range(n) by partial Fisher-Yates, in draw order."""
        k = min(k, n)
        pool = list(range(n))
        for i in range(k):
            j = i + self.bounded(n - i)
            pool[i], pool[j] = pool[j], pool[i]
        return pool[:k]

    def permutation(self, n: int) -> list[int]:
        return self.sample_indices(n, n)


def derive_seed(*parts: int) -> int:
    """Mix integers into one 64-bit seed (order-sensitive)."""
    acc = 0
    for part in parts:
        acc = SplitMix64(acc ^ (part & MASK64)).next_u64()
    return acc
