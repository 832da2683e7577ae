"""Small shared helpers: order-stable summation and float formatting."""

from __future__ import annotations

import numpy as np

_index_zeros_cache = np.zeros(16384, dtype=np.intp)


def _index_zeros(n: int) -> np.ndarray:
    global _index_zeros_cache
    if n > _index_zeros_cache.size:
        _index_zeros_cache = np.zeros(n, dtype=np.intp)
    return _index_zeros_cache[:n]


class RunningSum:
    """Scalar accumulator equal, bit for bit, to `+=`-ing every value in order.

    `ndarray.sum()` uses pairwise summation, so a total assembled from partial
    sums depends on where the input was sliced. `np.add.at` instead applies
    one in-order `+=` per element, which makes the result independent of how
    the stream was chunked.
    """

    __slots__ = ("_acc",)

    def __init__(self, start: float = 0.0):
        self._acc = np.array([start], dtype=np.float64)

    def add(self, values) -> None:
        values = np.asarray(values, dtype=np.float64)
        if values.size:
            np.add.at(self._acc, _index_zeros(values.size), values)

    @property
    def value(self) -> float:
        return float(self._acc[0])


def ordered_bincount_add(acc: np.ndarray, indices: np.ndarray, values: np.ndarray) -> None:
    """acc[indices[i]] += values[i], applied strictly in index order."""
    np.add.at(acc, indices, values)


def ordered_bincount_max(acc: np.ndarray, indices: np.ndarray, values: np.ndarray) -> None:
    """acc[indices[i]] = max(acc[indices[i]], values[i]) for every i."""
    np.maximum.at(acc, indices, values)


def fmt17(x: float) -> str:
    """Format with 17 significant digits; parsing the result recovers x exactly."""
    return format(float(x), ".17g")
