"""SplitMix64 streams and the shuffles built on them.

Every stochastic step in the pipeline draws from a SplitMix64 stream keyed by
an explicit seed, so results never depend on ambient interpreter state.
"""

from __future__ import annotations

from typing import Iterator, MutableSequence, TypeVar

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB

T = TypeVar("T")


def _mix(z: int) -> int:
    z = ((z ^ (z >> 30)) * _MIX1) & MASK64
    z = ((z ^ (z >> 27)) * _MIX2) & MASK64
    return z ^ (z >> 31)


class SplitMix64:
    """Sequential SplitMix64 generator (Steele, Lea & Flood 2014)."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next(self) -> int:
        self.state = (self.state + GAMMA) & MASK64
        return _mix(self.state)

    def below(self, bound: int) -> int:
        """Uniform-ish integer in ``[0, bound)`` by modulo reduction."""
        if bound <= 0:
            raise ValueError("bound must be positive")
        return self.next() % bound

    def __iter__(self) -> Iterator[int]:
        while True:
            yield self.next()


def splitmix64_block(seeds, start: int, count: int) -> np.ndarray:
    """Outputs ``start .. start+count-1`` (0-based) of one stream per seed.

    Output ``k`` of a SplitMix64 stream is ``mix(seed + (k+1)*GAMMA)``, so whole
    blocks can be produced without stepping through the sequence.  Returns an
    array of shape ``(len(seeds), count)`` of ``uint64``.
    """
    seeds = np.asarray(seeds, dtype=np.uint64).reshape(-1, 1)
    k = np.arange(start + 1, start + count + 1, dtype=np.uint64).reshape(1, -1)
    with np.errstate(over="ignore"):
        z = seeds + k * np.uint64(GAMMA)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
    return z


def fisher_yates(items: MutableSequence[T], rng: SplitMix64) -> MutableSequence[T]:
    """In-place Fisher-Yates shuffle driven by ``rng``; returns ``items``."""
    for i in range(len(items) - 1, 0, -1):
        j = rng.below(i + 1)
        items[i], items[j] = items[j], items[i]
    return items


def hash64(text: str) -> int:
    """FNV-1a 64-bit hash of the UTF-8 bytes of ``text``."""
    h = 0xCBF29CE484222325
    for byte in text.encode("utf-8"):
        h ^= byte
        h = (h * 0x100000001B3) & MASK64
    return h
