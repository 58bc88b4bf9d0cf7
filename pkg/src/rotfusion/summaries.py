"""Post-estimation summaries: covariate quintile contrasts, binned heatmaps,
spatial cell means, positivity shares and temporal trends."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .validation.bootstrap import BootstrapResult, cluster_bootstrap

EARTH_RADIUS_KM = 6371.0088
TICK_PERCENTILES = (1, 10, 25, 50, 75, 90, 99)


def _vec(values, name: str) -> np.ndarray:
    out = np.asarray(values, dtype=np.float64).ravel()
    if not np.all(np.isfinite(out)):
        raise ValueError(f"{name} must be finite")
    return out


@dataclass(frozen=True)
class QuintileContrast:
    top: float
    bottom: float
    overall: float
    n_per_group: int


def quintile_contrast(effects, covariate, q: float = 0.2) -> QuintileContrast:
    """Mean effect over the top and bottom ``q`` share of a covariate.

    Each group holds floor(q * n) points (at least one), picked from a stable
    sort of the covariate so ties keep their input order.
    """
    e = _vec(effects, "effects")
    c = _vec(covariate, "covariate")
    if len(e) != len(c):
        raise ValueError("effects and covariate must have equal length")
    if len(e) < 5:
        raise ValueError("need at least 5 points")
    if not 0 < q <= 0.5:
        raise ValueError("q must lie in (0, 0.5]")
    if np.ptp(c) == 0:
        raise ValueError("covariate is constant; quantile groups are undefined")
    k = max(1, int(math.floor(q * len(e))))
    order = np.argsort(c, kind="stable")
    return QuintileContrast(float(e[order[-k:]].mean()), float(e[order[:k]].mean()),
                            float(e.mean()), k)


@dataclass
class BinnedGrid:
    x_edges: np.ndarray
    y_edges: np.ndarray
    cell_mean: np.ndarray          # (nx, ny); nan where count < min_count
    cell_count: np.ndarray         # (nx, ny)
    percentile_ticks: dict = field(default_factory=dict)
    min_count: int = 1
    n_clipped: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def n_points(self) -> int:
        return int(self.cell_count.sum())

    def recombined_mean(self) -> float:
        shown = self.cell_count >= max(self.min_count, 1)
        w = self.cell_count[shown]
        return float(np.sum(self.cell_mean[shown] * w) / np.sum(w))

    def long_rows(self):
        for i in range(self.cell_count.shape[0]):
            for j in range(self.cell_count.shape[1]):
                if self.cell_count[i, j] > 0:
                    yield (i, j, self.x_edges[i], self.x_edges[i + 1], self.y_edges[j],
                           self.y_edges[j + 1], self.cell_mean[i, j], int(self.cell_count[i, j]))

    def sidecar(self) -> dict:
        return {
            "percentile_ticks": self.percentile_ticks,
            "min_count": self.min_count,
            "n_points": self.n_points,
            "n_clipped": self.n_clipped,
            "n_cells": int(np.count_nonzero(self.cell_count)),
            "notes": list(self.notes),
        }


def _canonical(*cols):
    """Reorder points by value so sums, and hence grids, are bitwise identical
    under any permutation of the input."""
    order = np.lexsort(cols[::-1])
    return [c[order] for c in cols]


def _cells(ix: np.ndarray, iy: np.ndarray, e: np.ndarray, nx: int, ny: int, min_count: int):
    count = np.zeros((nx, ny), np.int64)
    total = np.zeros((nx, ny))
    np.add.at(count, (ix, iy), 1)
    np.add.at(total, (ix, iy), e)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean = np.where(count >= max(min_count, 1), total / count, np.nan)
    return mean, count


def _axis_edges(v: np.ndarray, n_bins: int, name: str):
    if len(v) == 1:
        # a lone point gets a unit-width span centred on it
        return np.linspace(v[0] - 0.5, v[0] + 0.5, n_bins + 1)
    lo, hi = np.percentile(v, [1, 99])
    if not hi > lo:
        raise ValueError(f"{name} has zero range between its 1st and 99th percentiles")
    return np.linspace(lo, hi, n_bins + 1)


def _assign(v: np.ndarray, edges: np.ndarray) -> np.ndarray:
    """Bin index by edge comparison; values beyond the end edges go to the end bins."""
    return np.searchsorted(edges[1:-1], v, side="right")


def heatmap_grid(effects, cov_x, cov_y, n_bins: int = 40, *, min_count: int = 1) -> BinnedGrid:
    """Mean effect on an n_bins x n_bins grid of equal-width bins spanning the
    1st to 99th percentile of each covariate; points beyond that range are
    clipped into the edge bins and counted in ``n_clipped``."""
    e = _vec(effects, "effects")
    x = _vec(cov_x, "cov_x")
    y = _vec(cov_y, "cov_y")
    if not len(e) == len(x) == len(y):
        raise ValueError("effects, cov_x and cov_y must have equal length")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    if len(e) == 0:
        raise ValueError("no points")
    if len(e) > 1 and len(e) < n_bins:
        raise ValueError(f"need at least n_bins = {n_bins} points, got {len(e)}")
    x, y, e = _canonical(x, y, e)
    xe = _axis_edges(x, n_bins, "cov_x")
    ye = _axis_edges(y, n_bins, "cov_y")
    clipped = (x < xe[0]) | (x > xe[-1]) | (y < ye[0]) | (y > ye[-1])
    mean, count = _cells(_assign(x, xe), _assign(y, ye), e, n_bins, n_bins, min_count)
    ticks = {"x": dict(zip(map(str, TICK_PERCENTILES), np.percentile(x, TICK_PERCENTILES).tolist())),
             "y": dict(zip(map(str, TICK_PERCENTILES), np.percentile(y, TICK_PERCENTILES).tolist()))}
    notes = []
    if clipped.any():
        notes.append(f"{int(clipped.sum())} point(s) outside the 1st-99th percentile range "
                     f"were clipped into edge bins")
    return BinnedGrid(xe, ye, mean, count, ticks, min_count, int(clipped.sum()), notes)


def project_equirectangular(lat, lon, lat0: float, lon0: float):
    """Local (east, north) km offsets from (lat0, lon0)."""
    k = math.pi / 180.0 * EARTH_RADIUS_KM
    east = (np.asarray(lon) - lon0) * k * math.cos(math.radians(lat0))
    north = (np.asarray(lat) - lat0) * k
    return east, north


def spatial_grid(effects, lat, lon, cell_km: float = 10.0, *, area: bool = False,
                 min_count: int = 1) -> BinnedGrid:
    """Mean effect over square cells of a local equirectangular projection
    centred on the data centroid.

    ``cell_km`` is the cell side in km, or the cell area in km^2 when ``area``
    is set. Cell (i, j) covers east in [(i - 1/2) s, (i + 1/2) s) about the
    centroid, and likewise north. Edges are returned in projected km.
    """
    e = _vec(effects, "effects")
    la = _vec(lat, "lat")
    lo = _vec(lon, "lon")
    if not len(e) == len(la) == len(lo) or len(e) == 0:
        raise ValueError("effects, lat and lon must be non-empty and of equal length")
    if cell_km <= 0:
        raise ValueError("cell size must be positive")
    side = math.sqrt(cell_km) if area else float(cell_km)
    la, lo, e = _canonical(la, lo, e)
    lat0, lon0 = float(la.mean()), float(lo.mean())
    east, north = project_equirectangular(la, lo, lat0, lon0)
    ix = np.floor(east / side + 0.5).astype(np.int64)
    iy = np.floor(north / side + 0.5).astype(np.int64)
    x0, y0 = ix.min(), iy.min()
    nx, ny = int(ix.max() - x0 + 1), int(iy.max() - y0 + 1)
    mean, count = _cells(ix - x0, iy - y0, e, nx, ny, min_count)
    xe = (np.arange(nx + 1) + x0 - 0.5) * side
    ye = (np.arange(ny + 1) + y0 - 0.5) * side
    unit = "km^2 area" if area else "km side"
    notes = [f"cells are {cell_km:g} {unit} (side {side:g} km); a '10 km^2' cell size is "
             f"ambiguous between a 10 km side and a 10 km^2 area",
             f"projection origin lat={lat0!r} lon={lon0!r}"]
    return BinnedGrid(xe, ye, mean, count, {"origin": [lat0, lon0], "side_km": side},
                      min_count, 0, notes)


def positivity_fraction(effects) -> float:
    e = _vec(effects, "effects")
    if len(e) == 0:
        raise ValueError("no effects")
    return float(np.mean(e > 0))


def positivity_with_ci(effects, clusters, B: int = 10_000, seed: int = 0) -> BootstrapResult:
    """Share of strictly positive effects with a one-sided cluster-bootstrap
    95% interval [5th percentile, 1]."""
    e = _vec(effects, "effects")
    return cluster_bootstrap(clusters, {"effect": e}, "fraction_positive", B=B, seed=seed)


@dataclass(frozen=True)
class YearSummary:
    year: int
    n: int
    minimum: float
    q1: float
    median: float
    q3: float
    maximum: float


@dataclass
class TrendResult:
    per_year: list[YearSummary]
    slope: float
    se_slope: float
    intercept: float

    def to_dict(self) -> dict:
        return {"slope": self.slope, "se_slope": self.se_slope, "intercept": self.intercept,
                "per_year": [s.__dict__ for s in self.per_year]}


def temporal_trend(effects, years) -> TrendResult:
    """Five-number summaries per year and the OLS line of effect on year over
    all points."""
    e = _vec(effects, "effects")
    t = _vec(years, "years")
    if len(e) != len(t):
        raise ValueError("effects and years must have equal length")
    uniq = np.unique(t)
    if len(uniq) < 2:
        raise ValueError("need at least 2 distinct years")
    per_year = []
    for yr in uniq:
        v = e[t == yr]
        q = np.percentile(v, [0, 25, 50, 75, 100])
        per_year.append(YearSummary(int(yr), len(v), *map(float, q)))
    tc = t - t.mean()
    sxx = float(tc @ tc)
    # shifted by the first value so a constant series has an exact zero slope
    ec = e - e[0]
    slope = float(tc @ (ec - ec.mean()) / sxx)
    intercept = float(e[0] + ec.mean() - slope * t.mean())
    resid = e - intercept - slope * t
    n = len(e)
    se = math.sqrt(float(resid @ resid) / (n - 2) / sxx) if n > 2 else math.nan
    return TrendResult(per_year, slope, se, intercept)


def write_grid(csv_path: str | Path, grid: BinnedGrid, extra: dict | None = None) -> Path:
    """Long-format CSV of populated cells plus a JSON sidecar next to it."""
    csv_path = Path(csv_path)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["ix", "iy", "x_lo", "x_hi", "y_lo", "y_hi", "mean", "count"])
        for row in grid.long_rows():
            writer.writerow([row[0], row[1]] + [repr(float(v)) for v in row[2:7]] + [row[7]])
    side = csv_path.with_suffix(".json")
    payload = grid.sidecar()
    if extra:
        payload.update(extra)
    with open(side, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return side
