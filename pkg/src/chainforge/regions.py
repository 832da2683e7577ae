"""Contour thresholds for credible and confidence regions.

Credible regions are highest-posterior-density: sort the bins by mass,
include the heaviest bins until the requested fraction of the grid's mass is
covered, and report the mass of the last bin included as the threshold.
The region is then ``{bins : value >= threshold}``.

Confidence regions on profile grids use the likelihood-ratio recipe: the
threshold is ``lnl_max - q/2`` with q the chi-square quantile at the
requested level, degrees of freedom equal to the grid dimensionality (one
or two kept parameters).

Both return thresholds in ascending order, with requested levels sorted
descending in parallel, ready to feed to a contour routine that wants
increasing levels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .binning import POSTERIOR, PROFILE
from .errors import GridError

CREDIBLE = "credible"
CONFIDENCE = "confidence"


@dataclass(frozen=True)
class RegionThresholds:
    """Contour levels; requested[i] (descending) pairs with thresholds[i]
    (ascending): a larger region always has the lower cut."""

    kind: str  # CREDIBLE or CONFIDENCE
    requested: tuple[float, ...]
    thresholds: tuple[float, ...]


def _checked_levels(levels: Sequence[float]) -> list[float]:
    out = []
    for p in levels:
        p = float(p)
        if not 0.0 < p < 1.0:
            raise GridError(f"region level must be in (0, 1), got {p}")
        out.append(p)
    if not out:
        raise GridError("need at least one region level")
    return sorted(out, reverse=True)


def hpd_thresholds(grid, levels: Sequence[float]) -> RegionThresholds:
    """Highest-posterior-density thresholds for a posterior grid.

    For each level p: descending-sort the bin masses and accumulate until at
    least p of the total included mass is covered; the threshold is the mass
    of the last bin taken. Bins tied at the threshold all belong to the
    region, so membership is stable under bin permutation.
    """
    if grid.kind != POSTERIOR:
        raise GridError(f"credible regions need a posterior grid, got {grid.kind}")
    requested = _checked_levels(levels)
    flat = np.asarray(grid.values, dtype=np.float64).ravel()
    desc = np.sort(flat)[::-1]
    cumulative = np.cumsum(desc)
    total = float(cumulative[-1])
    if not total > 0.0:
        raise GridError("grid holds no mass; cannot form credible regions")
    thresholds = []
    for p in requested:
        take = int(np.searchsorted(cumulative, p * total, side="left"))
        thresholds.append(float(desc[min(take, desc.size - 1)]))
    return RegionThresholds(kind=CREDIBLE, requested=tuple(requested),
                            thresholds=tuple(thresholds))


def chi_square_quantile(p: float, dof: int) -> float:
    """Chi-square quantile q with F(q; dof) = p, for dof in {1, 2}.

    dof=2 has the closed form -2 ln(1-p); dof=1 inverts the CDF
    erf(sqrt(q/2)) by bisection to |q error| <= 1e-9.
    """
    if not 0.0 < p < 1.0:
        raise GridError(f"probability must be in (0, 1), got {p}")
    if dof == 2:
        return -2.0 * math.log1p(-p)
    if dof != 1:
        raise GridError(f"only 1 or 2 degrees of freedom supported, got {dof}")
    lo, hi = 0.0, 1.0
    while math.erf(math.sqrt(hi / 2.0)) < p:
        hi *= 2.0
    while hi - lo > 1e-9:
        mid = 0.5 * (lo + hi)
        if math.erf(math.sqrt(mid / 2.0)) < p:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def wilks_thresholds(grid, levels: Sequence[float]) -> RegionThresholds:
    """Likelihood-ratio confidence thresholds for a profile grid.

    threshold(p) = lnl_max - chi_square_quantile(p, dof)/2, with dof the
    grid dimensionality. Depends on the grid only through lnl_max.
    """
    if grid.kind != PROFILE:
        raise GridError(f"confidence regions need a profile grid, got {grid.kind}")
    if not np.isfinite(np.asarray(grid.values)).any():
        raise GridError("profile grid holds no finite values")
    requested = _checked_levels(levels)
    dof = grid.ndim
    thresholds = tuple(grid.lnl_max - 0.5 * chi_square_quantile(p, dof)
                       for p in requested)
    return RegionThresholds(kind=CONFIDENCE, requested=tuple(requested),
                            thresholds=thresholds)
