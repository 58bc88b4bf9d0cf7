"""Cluster bootstrap: whole experiments are resampled with replacement and
rows within an experiment are kept together.

Replicate r draws its clusters from a generator seeded by (seed, r), so the
replicates do not depend on evaluation order.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .. import _rng

log = logging.getLogger(__name__)


# Named statistics are written in terms of per-cluster sufficient sums so a
# replicate only needs the multiplicity of each cluster.
_SUMS = {
    "pearson_correlation": ("x", "y"),
    "ols_slope": ("x", "y"),
    "fraction_positive": ("effect",),
    "mean": ("effect",),
}
STATISTICS = tuple(_SUMS)
ONE_SIDED = {"fraction_positive"}


def _cluster_sums(name: str, data: Mapping[str, np.ndarray], codes: np.ndarray, g: int):
    def agg(v):
        return np.bincount(codes, weights=v, minlength=g)

    cnt = np.bincount(codes, minlength=g).astype(np.float64)
    if name in ("pearson_correlation", "ols_slope"):
        x = np.asarray(data["x"], dtype=np.float64)
        y = np.asarray(data["y"], dtype=np.float64)
        return np.stack([cnt, agg(x), agg(y), agg(x * x), agg(x * y), agg(y * y)])
    e = np.asarray(data["effect"], dtype=np.float64)
    return np.stack([cnt, agg(e), agg((e > 0).astype(np.float64))])


def _from_sums(name: str, s: np.ndarray) -> np.ndarray:
    """Statistic for every column of aggregated sums ``s`` (k, R); nan if undefined."""
    with np.errstate(invalid="ignore", divide="ignore"):
        n = s[0]
        if name in ("pearson_correlation", "ols_slope"):
            sx, sy, sxx, sxy, syy = s[1:]
            cxx = sxx - sx * sx / n
            cxy = sxy - sx * sy / n
            cyy = syy - sy * sy / n
            tol = 1e-12 * np.maximum(sxx, 1e-300)
            cxx = np.where(cxx > tol, cxx, np.nan)
            if name == "ols_slope":
                return cxy / cxx
            cyy = np.where(cyy > 1e-12 * np.maximum(syy, 1e-300), cyy, np.nan)
            return np.clip(cxy / np.sqrt(cxx * cyy), -1.0, 1.0)
        if name == "mean":
            return s[1] / n
        return s[2] / n


@dataclass
class BootstrapResult:
    statistic: str
    estimate: float
    ci_low: float
    ci_high: float
    B: int
    seed: int
    n_clusters: int
    n_skipped: int
    one_sided: bool
    level: float = 0.95
    replicates: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("statistic", "estimate", "ci_low", "ci_high", "B",
                                              "seed", "n_clusters", "n_skipped", "one_sided",
                                              "level")}


def resample_counts(n_clusters: int, B: int, seed: int) -> np.ndarray:
    """(B, n_clusters) multiplicities; row r comes from the (seed, r) stream."""
    out = np.empty((B, n_clusters), np.int64)
    for r in range(B):
        rng = _rng.unit_generator(seed, _rng.STREAM_BOOTSTRAP, r)
        out[r] = np.bincount(rng.integers(0, n_clusters, n_clusters), minlength=n_clusters)
    return out


def percentile_interval(values: np.ndarray, level: float = 0.95, one_sided: bool = False,
                        upper_bound: float = 1.0):
    values = np.asarray(values, dtype=np.float64)
    if len(values) == 0:
        return math.nan, math.nan
    alpha = 1.0 - level
    if one_sided:
        return float(np.percentile(values, 100 * alpha)), upper_bound
    lo, hi = np.percentile(values, [100 * alpha / 2, 100 * (1 - alpha / 2)])
    return float(lo), float(hi)


def cluster_bootstrap(clusters, data: Mapping[str, np.ndarray],
                      statistic: str | Callable[[Mapping[str, np.ndarray]], float],
                      B: int = 10_000, seed: int = 0, *, level: float = 0.95) -> BootstrapResult:
    """Percentile cluster-bootstrap interval for a statistic.

    Args:
        clusters: (n,) cluster (experiment) label of each row.
        data: column name -> (n,) values. Named statistics read ``x`` and ``y``
            (pearson_correlation, ols_slope of y on x) or ``effect``
            (fraction_positive, mean).
        statistic: one of STATISTICS or a callable on a column mapping.
        B: number of replicates.
        seed: master seed.
        level: coverage. fraction_positive gets a one-sided interval
            [lower percentile, 1].

    Replicates on which the statistic is undefined (nan, or raising for
    callables) are skipped and counted.
    """
    if B < 1:
        raise ValueError("B must be >= 1")
    labels, codes = np.unique(np.asarray(clusters), return_inverse=True)
    g = len(labels)
    if g < 1:
        raise ValueError("no clusters")
    if g < 2:
        log.warning("cluster bootstrap with a single cluster: every replicate is identical")
    counts = resample_counts(g, B, seed)

    if isinstance(statistic, str):
        if statistic not in _SUMS:
            raise ValueError(f"unknown statistic {statistic!r}; choose from {STATISTICS}")
        name = statistic
        sums = _cluster_sums(name, data, codes, g)
        estimate = float(_from_sums(name, sums.sum(axis=1, keepdims=True))[0])
        reps = _from_sums(name, sums @ counts.T.astype(np.float64))
        one_sided = name in ONE_SIDED
    else:
        name = getattr(statistic, "__name__", "custom")
        cols = {k: np.asarray(v) for k, v in data.items()}
        members = [np.flatnonzero(codes == c) for c in range(g)]
        estimate = float(statistic(cols))
        reps = np.empty(B)
        for r in range(B):
            rows = np.concatenate([np.repeat(members[c], counts[r, c]) for c in range(g)])
            try:
                reps[r] = float(statistic({k: v[rows] for k, v in cols.items()}))
            except (ValueError, ZeroDivisionError, FloatingPointError):
                reps[r] = math.nan
        one_sided = False

    ok = np.isfinite(reps)
    n_skipped = int((~ok).sum())
    if n_skipped:
        log.warning("%s undefined on %d of %d bootstrap replicates; skipped", name, n_skipped, B)
    lo, hi = percentile_interval(reps[ok], level, one_sided)
    return BootstrapResult(name, estimate, lo, hi, B, int(seed), g, n_skipped, one_sided, level,
                           reps[ok])


def mean_difference(cols: Mapping[str, np.ndarray]) -> float:
    """mean(exp) - mean(sat); the additive calibration offset."""
    return float(np.mean(cols["exp"]) - np.mean(cols["sat"]))
