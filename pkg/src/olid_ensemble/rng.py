"""Counter-based random streams.

Every draw is a pure function of ``(seed, counter)`` through the splitmix64
finalizer, so dropout masks, MLM masking and shuffles are reproducible no
matter in which order the consumers ask for them.
"""

from __future__ import annotations

import hashlib

import numpy as np
from scipy.special import ndtr, ndtri

_MASK64 = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def splitmix64(seed: int, counters: np.ndarray) -> np.ndarray:
    """Raw 64-bit outputs for the given counters (vectorised)."""
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + (counters + np.uint64(1)) * _GOLDEN
        return _mix(z)


def _key_hash(key) -> int:
    digest = hashlib.blake2b(repr(key).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class RngStream:
    """Splitmix-style stream positioned at ``counter``.

    Draw methods consume ``n`` consecutive counters and advance the stream.
    ``fork`` derives an independent child stream from a hashable key without
    touching the parent's counter.
    """

    __slots__ = ("seed", "counter")

    def __init__(self, seed: int, counter: int = 0):
        self.seed = int(seed) & _MASK64
        self.counter = int(counter) & _MASK64

    def __repr__(self):
        return f"RngStream(seed={self.seed}, counter={self.counter})"

    def fork(self, *key) -> RngStream:
        child = int(splitmix64(self.seed ^ _key_hash(key), np.array([0]))[0])
        return RngStream(child, 0)

    def bits(self, n: int) -> np.ndarray:
        out = splitmix64(self.seed, np.arange(self.counter, self.counter + n, dtype=np.uint64))
        self.counter = (self.counter + n) & _MASK64
        return out

    def uniform(self, shape) -> np.ndarray:
        """Float64 draws in [0, 1) with 53 random bits each."""
        shape = (shape,) if isinstance(shape, int) else tuple(shape)
        n = int(np.prod(shape, dtype=np.int64))
        u = (self.bits(n) >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
        return u.reshape(shape)

    def integers(self, high: int, shape) -> np.ndarray:
        """Integers in [0, high)."""
        return np.minimum((self.uniform(shape) * high).astype(np.int64), high - 1)

    def permutation(self, n: int) -> np.ndarray:
        # stable argsort keeps this a pure function of the drawn keys
        return np.argsort(self.uniform(n), kind="stable")

    def truncated_normal(self, shape, std: float, bound: float = 2.0) -> np.ndarray:
        """Normal(0, std) truncated at +-bound*std, by inverse CDF (no rejection)."""
        lo, hi = ndtr(-bound), ndtr(bound)
        return std * ndtri(lo + (hi - lo) * self.uniform(shape))
