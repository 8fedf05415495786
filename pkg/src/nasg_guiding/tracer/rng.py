"""Counter-based uniform random numbers keyed by (seed, iteration, pixel, bounce, dimension)."""
from __future__ import annotations

import numpy as np

_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_S30, _S27, _S31, _S11 = np.uint64(30), np.uint64(27), np.uint64(31), np.uint64(11)


def mix64(x):
    """splitmix64 finalizer on uint64 arrays (wrapping arithmetic)."""
    x = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        x = (x ^ (x >> _S30)) * _M1
        x = (x ^ (x >> _S27)) * _M2
    return x ^ (x >> _S31)


def combine(key, value):
    with np.errstate(over="ignore"):
        v = np.asarray(value, dtype=np.uint64) * _GOLDEN + _GOLDEN
    return mix64(np.asarray(key, dtype=np.uint64) ^ v)


def to_unit(h):
    """Top 53 bits as a double in [0, 1)."""
    return (h >> _S11).astype(np.float64) * (1.0 / 9007199254740992.0)


class PathRng:
    """Per-path stream: one base key per ray, draws addressed by (bounce, dim)."""

    def __init__(self, seed: int, iteration, pixel):
        base = combine(np.uint64(0x5EED), np.uint64(seed))
        base = combine(base, np.asarray(iteration, dtype=np.uint64))
        self.key = combine(base, np.asarray(pixel, dtype=np.uint64))

    def uniform(self, bounce: int, dim: int, subset=None):
        key = self.key if subset is None else self.key[subset]
        return to_unit(combine(key, np.uint64(bounce * 64 + dim)))
