"""Streaming 1D/2D weighted binning over a chain store.

Two reductions share one loop: marginalized posteriors sum the posterior
weight of every sample falling in a bin, profile likelihoods keep the
largest ln-likelihood seen in a bin. Both stream the store one chunk at a
time, so memory stays O(chunk_rows) no matter how many rows the store has,
and partial grids from separate stores combine with merge_grids (sum for
posteriors, element-wise max for profiles).

Accumulation order is pinned to row order (see util.RunningSum), which makes
every grid bit-identical for any chunk size and reproducible run to run.

Bins are uniform and half-open, ``[edge_i, edge_i+1)``, except that a value
exactly equal to the upper limit lands in the last bin. Values outside
``[lo, hi]`` are excluded from the grid but accounted for in
outside_count/outside_weight so no mass is silently dropped.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import GridError
from .util import RunningSum, ordered_bincount_add, ordered_bincount_max

POSTERIOR = "posterior"
PROFILE = "profile"

LOG_ZERO = -math.inf  # sentinel for profile bins that hold no samples


class _OutsideMarker:
    """Singleton returned by bin_index for values outside the axis limits."""

    def __repr__(self) -> str:
        return "OUTSIDE"


OUTSIDE = _OutsideMarker()


@dataclass(frozen=True)
class BinSpec1D:
    """Axis definition: which column, its limits, and the bin count."""

    variable: str
    lo: float
    hi: float
    nbins: int

    def __post_init__(self):
        if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
            raise GridError(f"axis {self.variable!r}: limits must be finite")
        if not self.lo < self.hi:
            raise GridError(f"axis {self.variable!r}: lo must be < hi, got "
                            f"({self.lo}, {self.hi})")
        if self.nbins < 1:
            raise GridError(f"axis {self.variable!r}: nbins must be >= 1")

    @property
    def edges(self) -> np.ndarray:
        """nbins + 1 uniform edges; first and last are exactly lo and hi."""
        return np.linspace(self.lo, self.hi, self.nbins + 1)

    @property
    def centers(self) -> np.ndarray:
        edges = self.edges
        return 0.5 * (edges[:-1] + edges[1:])


@dataclass(frozen=True)
class BinSpec2D:
    x: BinSpec1D
    y: BinSpec1D

    def __post_init__(self):
        if self.x.variable == self.y.variable:
            raise GridError(f"2D grid needs two distinct variables, got "
                            f"{self.x.variable!r} twice")


def bin_index(value: float, spec: BinSpec1D):
    """Bin index of a scalar value, or OUTSIDE.

    Bins are half-open on uniform edges; value == hi maps to the last bin.
    """
    if math.isnan(value):
        raise GridError(f"axis {spec.variable!r}: cannot bin NaN")
    if value < spec.lo or value > spec.hi:
        return OUTSIDE
    if value == spec.hi:
        return spec.nbins - 1
    return int(np.searchsorted(spec.edges, value, side="right")) - 1


def _axis_indices(values: np.ndarray, spec: BinSpec1D) -> np.ndarray:
    """Vectorized bin_index; OUTSIDE is encoded as spec.nbins."""
    if np.isnan(values).any():
        raise GridError(f"axis {spec.variable!r}: cannot bin NaN")
    idx = np.searchsorted(spec.edges, values, side="right") - 1
    idx[values == spec.hi] = spec.nbins - 1
    idx[(values < spec.lo) | (values > spec.hi)] = spec.nbins
    return idx


@dataclass(eq=False)
class Grid1D:
    """Binned 1D reduction; kind is POSTERIOR (weight sums) or PROFILE
    (ln-likelihood maxima, LOG_ZERO where empty)."""

    spec: BinSpec1D
    kind: str
    values: np.ndarray
    outside_count: int
    outside_weight: Optional[float] = None  # posterior grids only
    total_weight: Optional[float] = None    # posterior grids only
    lnl_max: Optional[float] = None         # profile grids only

    @property
    def ndim(self) -> int:
        return 1


@dataclass(eq=False)
class Grid2D:
    """As Grid1D over a 2D lattice; values[i, j] is x-bin i, y-bin j."""

    spec: BinSpec2D
    kind: str
    values: np.ndarray
    outside_count: int
    outside_weight: Optional[float] = None
    total_weight: Optional[float] = None
    lnl_max: Optional[float] = None

    @property
    def ndim(self) -> int:
        return 2


def _flat_indices_1d(store, spec: BinSpec1D, chunk_index: int):
    x = store.read_column_chunk(spec.variable, chunk_index)
    return _axis_indices(x, spec), spec.nbins


def _flat_indices_2d(store, spec: BinSpec2D, chunk_index: int):
    nx, ny = spec.x.nbins, spec.y.nbins
    ix = _axis_indices(store.read_column_chunk(spec.x.variable, chunk_index),
                       spec.x)
    iy = _axis_indices(store.read_column_chunk(spec.y.variable, chunk_index),
                       spec.y)
    outside = (ix == nx) | (iy == ny)
    flat = ix * ny + iy
    flat[outside] = nx * ny
    return flat, nx * ny


def _check_axes(store, *axes: BinSpec1D) -> None:
    for axis in axes:
        if not store.has_column(axis.variable):
            raise GridError(f"store has no column {axis.variable!r}")


def _sum_stream(store, spec, flat_fn, ncells):
    # One accumulator slot per cell plus a trailing slot for outside mass;
    # np.add.at keeps every += in row order, so the result is independent of
    # chunk_rows (see module docstring).
    acc = np.zeros(ncells + 1)
    total = RunningSum()
    outside_count = 0
    for ci in range(store.n_chunks):
        w = store.read_column_chunk("weight", ci)
        flat, out_slot = flat_fn(store, spec, ci)
        ordered_bincount_add(acc, flat, w)
        total.add(w)
        outside_count += int(np.count_nonzero(flat == out_slot))
    return acc[:ncells], int(outside_count), float(acc[ncells]), total.value


def _max_stream(store, spec, flat_fn, ncells):
    acc = np.full(ncells + 1, LOG_ZERO)
    outside_count = 0
    for ci in range(store.n_chunks):
        lnl = store.read_column_chunk("loglike", ci)
        flat, out_slot = flat_fn(store, spec, ci)
        ordered_bincount_max(acc, flat, lnl)
        outside_count += int(np.count_nonzero(flat == out_slot))
    values = acc[:ncells]
    lnl_max = float(values.max()) if ncells else LOG_ZERO
    return values, int(outside_count), lnl_max


def marginalize_1d(store, spec: BinSpec1D) -> Grid1D:
    """Posterior mass per bin: the weight sum of every sample in the bin."""
    _check_axes(store, spec)
    values, outside_count, outside_weight, total = _sum_stream(
        store, spec, _flat_indices_1d, spec.nbins)
    return Grid1D(spec=spec, kind=POSTERIOR, values=values,
                  outside_count=outside_count, outside_weight=outside_weight,
                  total_weight=total)


def marginalize_2d(store, spec: BinSpec2D) -> Grid2D:
    """2D posterior mass; a sample is outside if either coordinate is."""
    _check_axes(store, spec.x, spec.y)
    nx, ny = spec.x.nbins, spec.y.nbins
    values, outside_count, outside_weight, total = _sum_stream(
        store, spec, _flat_indices_2d, nx * ny)
    return Grid2D(spec=spec, kind=POSTERIOR, values=values.reshape(nx, ny),
                  outside_count=outside_count, outside_weight=outside_weight,
                  total_weight=total)


def profile_1d(store, spec: BinSpec1D) -> Grid1D:
    """Profile likelihood per bin: the max ln-likelihood of samples in it."""
    _check_axes(store, spec)
    values, outside_count, lnl_max = _max_stream(
        store, spec, _flat_indices_1d, spec.nbins)
    return Grid1D(spec=spec, kind=PROFILE, values=values,
                  outside_count=outside_count, lnl_max=lnl_max)


def profile_2d(store, spec: BinSpec2D) -> Grid2D:
    _check_axes(store, spec.x, spec.y)
    nx, ny = spec.x.nbins, spec.y.nbins
    values, outside_count, lnl_max = _max_stream(
        store, spec, _flat_indices_2d, nx * ny)
    return Grid2D(spec=spec, kind=PROFILE, values=values.reshape(nx, ny),
                  outside_count=outside_count, lnl_max=lnl_max)


def merge_grids(a, b):
    """Combine two partial grids over the same spec.

    Posterior grids add element-wise (weights, like the bins themselves);
    profile grids take element-wise maxima. Outside counts always add:
    merging a grid with itself double-counts by construction, but the
    profile statistic (values, lnl_max) is idempotent.
    """
    if type(a) is not type(b):
        raise GridError(f"cannot merge {type(a).__name__} with "
                        f"{type(b).__name__}")
    if a.spec != b.spec:
        raise GridError("cannot merge grids with different bin specs")
    if a.kind != b.kind:
        raise GridError(f"cannot merge {a.kind} grid with {b.kind} grid")
    cls = type(a)
    if a.kind == POSTERIOR:
        return cls(spec=a.spec, kind=POSTERIOR,
                   values=a.values + b.values,
                   outside_count=a.outside_count + b.outside_count,
                   outside_weight=a.outside_weight + b.outside_weight,
                   total_weight=a.total_weight + b.total_weight)
    return cls(spec=a.spec, kind=PROFILE,
               values=np.maximum(a.values, b.values),
               outside_count=a.outside_count + b.outside_count,
               lnl_max=max(a.lnl_max, b.lnl_max))
