"""Portable pseudo-random numbers: splitmix64 seeding a xoshiro256** stream.

Every random draw in the package goes through :class:`Rng` so that a given
seed produces the same stream on every platform.  Bulk draws are jitted with
numba; the arithmetic is plain 64-bit unsigned integer math.
"""
from __future__ import annotations

import math

import numba
import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix64_mix(z: int) -> int:
    z &= MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def splitmix64(state: int) -> tuple[int, int]:
    """One splitmix64 step. Returns ``(new_state, output)``."""
    state = (state + GOLDEN) & MASK64
    return state, splitmix64_mix(state)


def derive_seed(seed: int, index: int) -> int:
    """The ``index``-th (0-based) splitmix64 output of the stream seeded by ``seed``.

    O(1), so per-item seeds can be computed in any order.
    """
    return splitmix64_mix((seed + (index + 1) * GOLDEN) & MASK64)


_U = np.uint64


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << _U(k)) | (x >> _U(64 - k))


@numba.njit(cache=True)
def _next(s):
    result = _rotl(s[1] * _U(5), 7) * _U(9)
    t = s[1] << _U(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@numba.njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.shape[0]):
        out[i] = _next(s)


@numba.njit(cache=True)
def _fill_double(s, out):
    # top 53 bits -> [0, 1)
    for i in range(out.shape[0]):
        out[i] = (_next(s) >> _U(11)) * (1.0 / 9007199254740992.0)


@numba.njit(cache=True)
def _fill_normal(s, out):
    n = out.shape[0]
    i = 0
    while i < n:
        u1 = 1.0 - (_next(s) >> _U(11)) * (1.0 / 9007199254740992.0)
        u2 = (_next(s) >> _U(11)) * (1.0 / 9007199254740992.0)
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        i += 2


class Rng:
    """xoshiro256** generator whose 256-bit state is filled by splitmix64(seed)."""

    def __init__(self, seed: int):
        if seed < 0 or seed > MASK64:
            raise ValueError(f"seed must be a 64-bit unsigned integer, got {seed}")
        self.seed = seed
        words = []
        state = seed
        for _ in range(4):
            state, out = splitmix64(state)
            words.append(out)
        self._s = np.array(words, dtype=np.uint64)

    def next_u64(self) -> int:
        out = np.empty(1, dtype=np.uint64)
        _fill_u64(self._s, out)
        return int(out[0])

    def u64(self, size: int) -> np.ndarray:
        out = np.empty(size, dtype=np.uint64)
        _fill_u64(self._s, out)
        return out

    def random(self, size=None):
        """Uniform doubles in [0, 1)."""
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        _fill_double(self._s, out)
        return float(out[0]) if size is None else out.reshape(size)

    def uniform(self, low: float, high: float, size=None):
        u = self.random(size)
        return low + (high - low) * u

    def normal(self, size=None, scale: float = 1.0):
        n = 1 if size is None else int(np.prod(size))
        out = np.empty(n, dtype=np.float64)
        _fill_normal(self._s, out)
        out *= scale
        return float(out[0]) if size is None else out.reshape(size)

    def integers(self, low: int, high: int) -> int:
        """Unbiased integer in [low, high)."""
        span = high - low
        if span <= 0:
            raise ValueError(f"empty range [{low}, {high})")
        threshold = ((1 << 64) - span) % span
        while True:
            x = self.next_u64()
            if x >= threshold:
                return low + x % span

    def permutation(self, n: int) -> list[int]:
        items = list(range(n))
        self.shuffle(items)
        return items

    def shuffle(self, items: list) -> None:
        # Fisher-Yates
        for i in range(len(items) - 1, 0, -1):
            j = self.integers(0, i + 1)
            items[i], items[j] = items[j], items[i]

    def choice(self, seq):
        return seq[self.integers(0, len(seq))]
