"""Unscrambled Sobol' low-discrepancy sequence (gray-code ordering).

Direction numbers are the Joe-Kuo ``new-joe-kuo-6.21201`` set, truncated to
the first 128 dimensions and shipped in ``data/sobol_directions.json``.
"""

from __future__ import annotations

import json
from functools import lru_cache
from importlib import resources

import numpy as np

BITS = 32
_SCALE = 2.0**-BITS


@lru_cache(maxsize=1)
def _table() -> dict:
    with resources.files("sensfan.data").joinpath("sobol_directions.json").open("r", encoding="utf-8") as fh:
        return json.load(fh)


def max_dimension() -> int:
    return len(_table()["dimensions"])


def direction_integers(dim: int) -> np.ndarray:
    """(dim, BITS) array of direction integers v[j, k] = m_k * 2**(BITS - k - 1)."""
    dims = _table()["dimensions"]
    if not 1 <= dim <= len(dims):
        raise ValueError(f"dimension must be in [1, {len(dims)}], got {dim}")
    v = np.zeros((dim, BITS), dtype=np.uint64)
    for j in range(dim):
        entry = dims[j]
        s = entry["degree"]
        if s == 0:
            m = [1] * BITS
        else:
            a = (entry["poly"] >> 1) & ((1 << (s - 1)) - 1)  # interior coefficients
            m = list(entry["m"])
            for k in range(s, BITS):
                new = m[k - s] ^ (m[k - s] << s)
                for i in range(1, s):
                    if (a >> (s - 1 - i)) & 1:
                        new ^= m[k - i] << i
                m.append(new)
        for k in range(BITS):
            v[j, k] = m[k] << (BITS - k - 1)
    return v


class SobolSequence:
    """Stateful Sobol' generator.

    ``draw(n)`` returns the next ``n`` points; ``index`` is the position of the
    next point in the sequence (point 0 is the origin).
    """

    def __init__(self, dimension: int, index: int = 0):
        self.dimension = dimension
        self.index = index
        self._v = direction_integers(dimension)

    def draw(self, n: int) -> np.ndarray:
        pts = self.points(self.index, n)
        self.index += n
        return pts

    def points(self, start: int, n: int) -> np.ndarray:
        if start < 0 or n < 0:
            raise ValueError("start and n must be non-negative")
        if start + n > 2**BITS:
            raise ValueError(f"at most 2**{BITS} points are supported")
        idx = np.arange(start, start + n, dtype=np.uint64)
        gray = idx ^ (idx >> np.uint64(1))
        x = np.zeros((n, self.dimension), dtype=np.uint64)
        one = np.uint64(1)
        for k in range(BITS):
            bit = ((gray >> np.uint64(k)) & one).astype(bool)
            if not bit.any():
                continue
            x[bit] ^= self._v[:, k]
        return x.astype(np.float64) * _SCALE


def sobol_points(dim: int, count: int, skip: int = 1) -> np.ndarray:
    """``count`` Sobol' points in [0, 1)^dim starting at sequence index ``skip``.

    The default ``skip=1`` drops the all-zero first point.
    """
    if count < 1:
        raise ValueError(f"count must be positive, got {count}")
    return SobolSequence(dim).points(skip, count)
