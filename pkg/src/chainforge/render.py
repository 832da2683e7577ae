"""Grid serialization (JSON/CSV) and plotting (PNG).

The JSON document is the lossless interchange format between pipeline
stages: it carries the grid geometry, the per-bin values (null where a
profile bin is empty), the bookkeeping totals, and optionally the region
thresholds. CSV is a flat per-bin table (bin centers and value, 17
significant digits, no header) for spreadsheet-style consumption.

Plots are rendered with matplotlib straight to a file: a filled step plot
for 1D grids, a heatmap for 2D grids, with one contour line per region
threshold drawn on the bin-center lattice. Rendering avoids pyplot and its
global state; identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np
from matplotlib import colormaps
from matplotlib.figure import Figure

from .binning import (
    LOG_ZERO,
    POSTERIOR,
    PROFILE,
    BinSpec1D,
    BinSpec2D,
    Grid1D,
    Grid2D,
)
from .errors import OutputError
from .regions import CONFIDENCE, CREDIBLE, RegionThresholds
from .util import fmt17

Grid = Union[Grid1D, Grid2D]


@dataclass
class PlotOptions:
    """Rendering knobs; width/height are pixels of the output image."""

    width: int = 800
    height: int = 600
    dpi: int = 100
    xlabel: Optional[str] = None
    ylabel: Optional[str] = None
    title: Optional[str] = None
    colormap: str = "viridis"


# -- JSON document ------------------------------------------------------------


def _encode_value(v: float) -> Optional[float]:
    return None if v == LOG_ZERO else float(v)


def grid_document(grid: Grid,
                  thresholds: Optional[RegionThresholds] = None) -> dict:
    """Grid (plus optional thresholds) as a JSON-ready dict."""
    if grid.ndim == 1:
        variables = [grid.spec.variable]
        edges = [grid.spec.edges.tolist()]
        values = [_encode_value(v) for v in grid.values]
    else:
        variables = [grid.spec.x.variable, grid.spec.y.variable]
        edges = [grid.spec.x.edges.tolist(), grid.spec.y.edges.tolist()]
        values = [[_encode_value(v) for v in row] for row in grid.values]
    doc = {
        "kind": grid.kind,
        "variables": variables,
        "edges": edges,
        "values": values,
        "total_weight": grid.total_weight,
        "outside_weight": grid.outside_weight,
        "outside_count": grid.outside_count,
        "lnl_max": None if grid.lnl_max is None else _encode_value(grid.lnl_max),
    }
    if thresholds is None:
        doc["thresholds"] = None
    else:
        doc["thresholds"] = {
            "kind": thresholds.kind,
            "requested": list(thresholds.requested),
            "thresholds": list(thresholds.thresholds),
        }
    return doc


def document_to_grid(doc: dict) -> tuple[Grid, Optional[RegionThresholds]]:
    """Inverse of grid_document; validates shape and reconstructs the grid."""
    try:
        kind = doc["kind"]
        variables = doc["variables"]
        edges = doc["edges"]
        raw_values = doc["values"]
        outside_count = int(doc["outside_count"])
        raw_thresholds = doc["thresholds"]
    except (KeyError, TypeError) as exc:
        raise OutputError(f"malformed grid document: {exc!r}") from exc
    if kind not in (POSTERIOR, PROFILE):
        raise OutputError(f"malformed grid document: unknown kind {kind!r}")
    if len(variables) not in (1, 2) or len(edges) != len(variables):
        raise OutputError("malformed grid document: need 1 or 2 axes")

    specs = []
    for name, axis_edges in zip(variables, edges):
        arr = np.asarray(axis_edges, dtype=np.float64)
        if arr.size < 2 or not np.all(np.diff(arr) > 0):
            raise OutputError(f"malformed grid document: edges for {name!r} "
                              f"must be strictly increasing")
        specs.append(BinSpec1D(variable=name, lo=float(arr[0]),
                               hi=float(arr[-1]), nbins=arr.size - 1))

    def decode(v):
        if v is None:
            return LOG_ZERO
        return float(v)

    if len(specs) == 1:
        values = np.array([decode(v) for v in raw_values], dtype=np.float64)
        if values.size != specs[0].nbins:
            raise OutputError("malformed grid document: value count does not "
                              "match bin count")
        spec: Union[BinSpec1D, BinSpec2D] = specs[0]
        cls = Grid1D
    else:
        spec = BinSpec2D(x=specs[0], y=specs[1])
        nx, ny = specs[0].nbins, specs[1].nbins
        if len(raw_values) != nx or any(len(r) != ny for r in raw_values):
            raise OutputError("malformed grid document: value matrix does not "
                              "match bin counts")
        values = np.array([[decode(v) for v in row] for row in raw_values],
                          dtype=np.float64)
        cls = Grid2D

    lnl_max = doc.get("lnl_max")
    grid = cls(
        spec=spec,
        kind=kind,
        values=values,
        outside_count=outside_count,
        outside_weight=(None if doc.get("outside_weight") is None
                        else float(doc["outside_weight"])),
        total_weight=(None if doc.get("total_weight") is None
                      else float(doc["total_weight"])),
        lnl_max=(decode(lnl_max) if kind == PROFILE else None),
    )

    thresholds = None
    if raw_thresholds is not None:
        try:
            tkind = raw_thresholds["kind"]
            requested = tuple(float(p) for p in raw_thresholds["requested"])
            cuts = tuple(float(t) for t in raw_thresholds["thresholds"])
        except (KeyError, TypeError, ValueError) as exc:
            raise OutputError(f"malformed thresholds block: {exc!r}") from exc
        if tkind not in (CREDIBLE, CONFIDENCE):
            raise OutputError(f"malformed thresholds block: kind {tkind!r}")
        thresholds = RegionThresholds(kind=tkind, requested=requested,
                                      thresholds=cuts)
    return grid, thresholds


# -- export / import ----------------------------------------------------------


def _csv_lines(grid: Grid) -> list[str]:
    lines = []
    if grid.ndim == 1:
        for center, v in zip(grid.spec.centers, grid.values):
            cell = "" if v == LOG_ZERO else fmt17(v)
            lines.append(f"{fmt17(center)},{cell}")
    else:
        ycenters = grid.spec.y.centers
        for xc, row in zip(grid.spec.x.centers, grid.values):
            for yc, v in zip(ycenters, row):
                cell = "" if v == LOG_ZERO else fmt17(v)
                lines.append(f"{fmt17(xc)},{fmt17(yc)},{cell}")
    return lines


def export_grid(grid: Grid, thresholds: Optional[RegionThresholds],
                fmt: str, path) -> None:
    """Write the grid as `fmt` ("json" or "csv") to `path`.

    JSON is the full document and round-trips losslessly; CSV is one row per
    bin (centers then value, empty value field for empty profile bins) and
    does not carry thresholds.
    """
    path = Path(path)
    if fmt == "json":
        payload = json.dumps(grid_document(grid, thresholds), indent=2,
                             allow_nan=False) + "\n"
    elif fmt == "csv":
        payload = "\n".join(_csv_lines(grid)) + "\n"
    else:
        raise OutputError(f"unknown export format {fmt!r} (use csv or json)")
    try:
        path.write_text(payload, encoding="utf-8")
    except OSError as exc:
        raise OutputError(f"cannot write {path}: {exc}") from exc


def load_grid_document(path) -> tuple[Grid, Optional[RegionThresholds]]:
    """Read a JSON grid document back into a grid."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise OutputError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise OutputError(f"{path}: not a grid document: {exc}") from exc
    return document_to_grid(doc)


# -- plotting -----------------------------------------------------------------


def _finite(values: np.ndarray) -> np.ndarray:
    return values[np.isfinite(values)]


def draw_grid(ax, grid: Grid, thresholds: Optional[RegionThresholds] = None,
              options: Optional[PlotOptions] = None):
    """Draw the grid onto an existing matplotlib axes.

    Returns the contour set when threshold contours were drawn, else None.
    Exposed so callers can compose their own figures; render_plot wraps it.
    """
    options = options or PlotOptions()
    if options.colormap not in colormaps:
        raise OutputError(f"unknown colormap {options.colormap!r}")
    contour_set = None
    cuts = list(thresholds.thresholds) if thresholds is not None else []

    if grid.ndim == 1:
        values = np.where(np.isfinite(grid.values), grid.values, np.nan)
        finite = _finite(grid.values)
        if finite.size:
            baseline = 0.0 if grid.kind == POSTERIOR else float(finite.min())
            ax.stairs(values, grid.spec.edges, fill=True, baseline=baseline,
                      color=colormaps[options.colormap](0.55))
        for cut in cuts:
            ax.axhline(cut, color="k", linewidth=1.0, linestyle="--")
        ax.set_xlim(grid.spec.lo, grid.spec.hi)
        ax.set_xlabel(options.xlabel or grid.spec.variable)
        ax.set_ylabel(options.ylabel or
                      ("posterior mass" if grid.kind == POSTERIOR
                       else "max ln-likelihood"))
    else:
        xspec, yspec = grid.spec.x, grid.spec.y
        finite = _finite(grid.values.ravel())
        vmin = vmax = 0.0
        if finite.size:
            vmin = 0.0 if grid.kind == POSTERIOR else float(finite.min())
            vmax = float(finite.max())
            mesh = ax.pcolormesh(xspec.edges, yspec.edges,
                                 np.ma.masked_invalid(grid.values.T),
                                 cmap=options.colormap, vmin=vmin, vmax=vmax)
            ax.figure.colorbar(mesh, ax=ax)
        if cuts:
            if finite.size == 0 or float(finite.max()) == float(finite.min()):
                warnings.warn("grid is flat; contour overlay skipped")
            else:
                usable = sorted({c for c in cuts
                                 if finite.min() <= c <= finite.max()})
                if len(usable) < len(cuts):
                    warnings.warn("some thresholds fall outside the grid's "
                                  "value range and were not drawn")
                if usable:
                    x, y = np.meshgrid(xspec.centers, yspec.centers)
                    z = np.where(np.isfinite(grid.values), grid.values,
                                 vmin).T
                    contour_set = ax.contour(x, y, z, levels=usable,
                                             colors="k", linewidths=1.0)
        ax.set_xlim(xspec.lo, xspec.hi)
        ax.set_ylim(yspec.lo, yspec.hi)
        ax.set_xlabel(options.xlabel or xspec.variable)
        ax.set_ylabel(options.ylabel or yspec.variable)
    if options.title:
        ax.set_title(options.title)
    return contour_set


def render_plot(grid: Grid, thresholds: Optional[RegionThresholds],
                path, options: Optional[PlotOptions] = None) -> None:
    """Render the grid to a raster image file (PNG)."""
    options = options or PlotOptions()
    if options.colormap not in colormaps:
        raise OutputError(f"unknown colormap {options.colormap!r}")
    fig = Figure(figsize=(options.width / options.dpi,
                          options.height / options.dpi), dpi=options.dpi)
    ax = fig.add_subplot()
    draw_grid(ax, grid, thresholds, options)
    try:
        fig.savefig(path, dpi=options.dpi)
    except OSError as exc:
        raise OutputError(f"cannot write plot to {path}: {exc}") from exc
