"""
Seedable 64-bit pseudo-random generator used by every stochastic step.

The generator is xoshiro256** seeded through splitmix64, so streams are
bit-exact across runs and platforms.  Independent substreams are derived
from a root seed and a name (a sample id, a model name, ...) so results
never depend on processing order or worker count.
"""

import hashlib
from typing import MutableSequence, Sequence, TypeVar

MASK64 = (1 << 64) - 1
T = TypeVar("T")


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state, returning (new_state, output)."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** generator."""

    __slots__ = ("_s",)

    def __init__(self, seed: int):
        state = seed & MASK64
        s = []
        for _ in range(4):
            state, out = splitmix64(state)
            s.append(out)
        self._s = s

    @classmethod
    def from_state(cls, state: Sequence[int]) -> "Xoshiro256":
        """Generator started from an explicit four-word state."""
        words = [int(x) & MASK64 for x in state]
        if len(words) != 4 or not any(words):
            raise ValueError("xoshiro256** needs four words, not all zero")
        rng = cls.__new__(cls)
        rng._s = words
        return rng

    @classmethod
    def substream(cls, seed: int, name: str) -> "Xoshiro256":
        """Generator for the named substream of a root seed."""
        digest = hashlib.sha256(f"{seed & MASK64}:{name}".encode("utf-8")).digest()
        return cls(int.from_bytes(digest[:8], "little"))

    def next_u64(self) -> int:
        s = self._s
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

    def uniform(self, lo: float, hi: float) -> float:
        """Uniform float in [lo, hi]; returns lo exactly when lo == hi."""
        if lo == hi:
            # Still consume a draw so the stream layout does not depend on the settings
            self.next_u64()
            return lo
        return lo + (hi - lo) * self.random()

    def randbelow(self, n: int) -> int:
        """Unbiased integer in [0, n) by rejection sampling."""
        if n <= 0:
            raise ValueError("randbelow() needs a positive bound, got %d" % n)
        bits = max(1, (n - 1).bit_length())
        while True:
            r = self.next_u64() >> (64 - bits)
            if r < n:
                return r


def fisher_yates_shuffle(items: Sequence[T], seed: int) -> list[T]:
    """Return a seeded Fisher-Yates permutation of ``items``."""
    rng = Xoshiro256(seed)
    return shuffle_with(items, rng)


def shuffle_with(items: Sequence[T], rng: Xoshiro256) -> list[T]:
    out: MutableSequence[T] = list(items)
    for i in range(len(out) - 1, 0, -1):
        j = rng.randbelow(i + 1)
        out[i], out[j] = out[j], out[i]
    return list(out)
