"""Counter-based 64-bit PRNG with named substreams.

The generator is SplitMix64 evaluated in counter mode: draw ``i`` of a stream
keyed by ``key`` is ``mix64(key + (i + 1) * GOLDEN)``.  Because every draw is
a pure function of ``(key, i)``, ports in other languages reproduce the same
sequences bit-for-bit.  Substreams are keyed by hashing ``"<seed>/<label>"``
with SHA-256, so one run seed fans out to independent per-purpose streams.
"""

from __future__ import annotations

import hashlib
import math
from typing import MutableSequence, TypeVar

PRNG_ID = "splitmix64-ctr/v1"

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

T = TypeVar("T")


def mix64(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def derive_key(seed: int, label: str) -> int:
    """64-bit stream key for ``label`` under ``seed`` (first 8 bytes of SHA-256, big-endian)."""
    digest = hashlib.sha256(f"{seed & MASK64}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "big")


class CounterRNG:
    """One keyed stream. Not thread-safe; make one per purpose."""

    def __init__(self, key: int, counter: int = 0):
        self.key = key & MASK64
        self.counter = counter

    @classmethod
    def substream(cls, seed: int, label: str) -> "CounterRNG":
        return cls(derive_key(seed, label))

    def next_u64(self) -> int:
        self.counter += 1
        return mix64(self.key + self.counter * GOLDEN)

    def random(self) -> float:
        """Uniform on the open interval (0, 1)."""
        return ((self.next_u64() >> 11) + 0.5) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        if n <= 0:
            raise ValueError("n must be positive")
        # Lemire-free rejection: reject the biased tail of the 64-bit range.
        limit = (1 << 64) - ((1 << 64) % n)
        while True:
            x = self.next_u64()
            if x < limit:
                return x % n

    def shuffle(self, items: MutableSequence[T]) -> None:
        """In-place Fisher-Yates, walking from the end."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]

    def normal(self) -> float:
        """Standard normal via Box-Muller (cosine branch only, two uniforms per draw)."""
        u1 = self.random()
        u2 = self.random()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def gamma(self, shape: float, scale: float = 1.0) -> float:
        """Gamma(shape, scale): Marsaglia-Tsang for shape >= 1, boosted for shape < 1."""
        if shape <= 0 or scale <= 0:
            raise ValueError("gamma shape and scale must be positive")
        if shape < 1.0:
            g = self._gamma_mt(shape + 1.0)
            return scale * g * self.random() ** (1.0 / shape)
        return scale * self._gamma_mt(shape)

    def _gamma_mt(self, shape: float) -> float:
        d = shape - 1.0 / 3.0
        c = 1.0 / math.sqrt(9.0 * d)
        while True:
            x = self.normal()
            v = 1.0 + c * x
            if v <= 0.0:
                continue
            v = v * v * v
            u = self.random()
            x2 = x * x
            if u < 1.0 - 0.0331 * x2 * x2:
                return d * v
            if math.log(u) < 0.5 * x2 + d * (1.0 - v + math.log(v)):
                return d * v

    def binomial(self, n: int, p: float) -> int:
        """Sum of ``n`` Bernoulli(p) trials; ``n`` is small (draft lengths)."""
        if p >= 1.0:
            return n
        if p <= 0.0:
            return 0
        return sum(1 for _ in range(n) if self.random() < p)
