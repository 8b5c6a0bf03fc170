"""
Portable pseudo-random generators and discrete samplers.

Traces must be reproducible across implementations and languages, so the
generator is a named algorithm (xoshiro256** seeded through splitmix64)
rather than Python's ``random`` or numpy's bit generators.
"""

from __future__ import annotations

import hashlib
from typing import List, MutableSequence, Sequence, TypeVar

from vl_instruct.errors import ValidationError

MASK64 = 0xFFFF_FFFF_FFFF_FFFF
_TWO_POW_64 = 1 << 64

T = TypeVar("T")


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class SplitMix64:
    """splitmix64; used to expand one 64-bit seed into generator state."""

    def __init__(self, seed: int):
        if not 0 <= seed < _TWO_POW_64:
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {seed}")
        self.state = seed

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E37_79B9_7F4A_7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58_476D_1CE4_E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D0_49BB_1331_11EB) & MASK64
        return z ^ (z >> 31)


class Xoshiro256StarStar:
    """xoshiro256** 1.0."""

    def __init__(self, state: Sequence[int]):
        if len(state) != 4 or not any(state):
            raise ValidationError("xoshiro256** needs four words, not all zero")
        self.s = [word & MASK64 for word in state]

    @classmethod
    def from_splitmix(cls, seeder: SplitMix64) -> Xoshiro256StarStar:
        return cls([seeder.next_u64() for _ in range(4)])

    @classmethod
    def from_seed(cls, seed: int) -> Xoshiro256StarStar:
        return cls.from_splitmix(SplitMix64(seed))

    def next_u64(self) -> int:
        s = self.s
        result = (_rotl((s[1] * 5) & MASK64, 7) * 9) & MASK64
        t = (s[1] << 17) & MASK64
        s[2] ^= s[0]
        s[3] ^= s[1]
        s[1] ^= s[2]
        s[0] ^= s[3]
        s[2] ^= t
        s[3] = _rotl(s[3], 45)
        return result

    def random(self) -> float:
        """Uniform float in [0, 1) with 53 random bits."""
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) (multiply-and-reject)."""
        if n <= 0:
            raise ValidationError(f"randbelow needs n >= 1, got {n}")
        threshold = (_TWO_POW_64 - n) % n
        while True:
            product = self.next_u64() * n
            if (product & MASK64) >= threshold:
                return product >> 64

    def shuffle(self, items: MutableSequence[T]) -> None:
        """In-place Fisher-Yates shuffle."""
        for i in range(len(items) - 1, 0, -1):
            j = self.randbelow(i + 1)
            items[i], items[j] = items[j], items[i]


def derive_seed(seed: int, label: str) -> int:
    """A 64-bit seed for an independent stream named ``label``."""
    digest = hashlib.blake2b(
        seed.to_bytes(8, "little") + label.encode("utf-8"), digest_size=8
    ).digest()
    return int.from_bytes(digest, "little")


class AliasTable:
    """
    Vose alias table over non-negative weights; O(1) per draw.

    Weights need not sum to one. Zero-weight outcomes are never drawn.
    """

    def __init__(self, weights: Sequence[float]):
        n = len(weights)
        total = float(sum(weights))
        if n == 0 or total <= 0 or any(w < 0 for w in weights):
            raise ValidationError("alias table needs non-negative weights with a positive sum")

        scaled = [w * n / total for w in weights]
        self.prob: List[float] = [0.0] * n
        self.alias: List[int] = list(range(n))
        small = [i for i, p in enumerate(scaled) if p < 1.0]
        large = [i for i, p in enumerate(scaled) if p >= 1.0]
        while small and large:
            s = small.pop()
            g = large.pop()
            self.prob[s] = scaled[s]
            self.alias[s] = g
            scaled[g] = scaled[g] + scaled[s] - 1.0
            (small if scaled[g] < 1.0 else large).append(g)
        fallback = next(i for i, w in enumerate(weights) if w > 0)
        for i in large + small:
            # leftovers are 1 up to rounding
            if weights[i] > 0:
                self.prob[i] = 1.0
            else:
                self.prob[i] = 0.0
                self.alias[i] = fallback

    def __len__(self) -> int:
        return len(self.prob)

    def sample(self, rng: Xoshiro256StarStar) -> int:
        column = rng.randbelow(len(self.prob))
        if rng.random() < self.prob[column]:
            return column
        return self.alias[column]


class EpochCycler:
    """
    Visits ``range(count)`` in a seeded order, reshuffling every epoch.

    Every index appears exactly once per epoch.
    """

    def __init__(self, count: int, rng: Xoshiro256StarStar):
        if count < 1:
            raise ValidationError(f"cycler needs count >= 1, got {count}")
        self.count = count
        self.rng = rng
        self.epoch = 0
        self._order = list(range(count))
        self._pos = count

    def next(self) -> int:
        if self._pos == self.count:
            self.rng.shuffle(self._order)
            self._pos = 0
            self.epoch += 1
        index = self._order[self._pos]
        self._pos += 1
        return index
