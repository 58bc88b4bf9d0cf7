"""Leave-one-site-out cross-validation of effect predictors.

For every held-out site the variant is fitted on the remaining sites, a
prediction is made for each of the held-out site's rows, row predictions are
averaged within year and then across years, and the result is compared with
the held-out site's observed mean effect (the mean over years of the yearly
mean paired effect).
"""
from __future__ import annotations

import csv
import enum
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy import linalg

from ..calibration.calibrate import WEATHER_NAMES, CalibrationError, CalibrationRow
from ..calibration.reml import RemlError, fit_reml

log = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
LONG_TERM_YEARS = 14
SHORT_TERM_YEARS = 5


class EffectsMode(str, enum.Enum):
    MIXED = "mixed"
    LINEAR = "linear"
    MIXED_WITH_TILLAGE = "mixed_with_tillage"


VARIANT_KINDS = ("satellite_only", "nearest_experiment", "all_other_experiments",
                 "single_weather", "all_four_weather", "hybrid_calibration")


@dataclass(frozen=True)
class ModelVariant:
    kind: str
    effects_mode: EffectsMode = EffectsMode.MIXED
    covariate: str | None = None      # for single_weather only

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown variant kind {self.kind!r}")
        object.__setattr__(self, "effects_mode", EffectsMode(self.effects_mode))
        if self.kind == "single_weather":
            if self.covariate not in WEATHER_NAMES:
                raise ValueError(f"single_weather needs one of {WEATHER_NAMES}, got {self.covariate!r}")
        elif self.covariate is not None:
            raise ValueError(f"variant {self.kind} takes no covariate")

    @property
    def name(self) -> str:
        return self.covariate if self.kind == "single_weather" else self.kind

    @classmethod
    def parse(cls, name: str, effects_mode="mixed") -> "ModelVariant":
        if name in WEATHER_NAMES:
            return cls("single_weather", effects_mode, name)
        return cls(name, effects_mode)

    @property
    def fitted(self) -> bool:
        return self.kind not in ("satellite_only", "nearest_experiment")

    def regressors(self) -> tuple[str, ...]:
        if self.kind == "hybrid_calibration":
            return ("sat",)
        if self.kind == "single_weather":
            return (self.covariate,)
        if self.kind == "all_four_weather":
            return WEATHER_NAMES
        return ()


# column order of the comparison table
TABLE_VARIANTS = ("satellite_only", "nearest_experiment", "all_other_experiments",
                  "early_precip", "growing_precip", "gdd", "edd", "all_four_weather",
                  "hybrid_calibration")


@dataclass(frozen=True)
class SitePrediction:
    site: str
    predicted: float
    observed: float
    sq_error: float
    n_years: int


@dataclass
class LoocvReport:
    variant: str
    effects_mode: str
    per_site: list[SitePrediction]
    fold_errors: dict[str, str] = field(default_factory=dict)
    site_years: dict[str, int] = field(default_factory=dict)

    @property
    def rmse(self) -> float:
        if not self.per_site:
            return math.nan
        return math.sqrt(float(np.mean([p.sq_error for p in self.per_site])))

    def _partition(self, keep) -> float | None:
        errs = [p.sq_error for p in self.per_site if keep(self.site_years.get(p.site, p.n_years))]
        if not errs:
            return None
        return math.sqrt(float(np.mean(errs)))

    @property
    def rmse_long_term(self) -> float | None:
        return self._partition(lambda n: n >= LONG_TERM_YEARS)

    @property
    def rmse_short_term(self) -> float | None:
        return self._partition(lambda n: n <= SHORT_TERM_YEARS)

    def to_dict(self) -> dict:
        return {
            "variant": self.variant,
            "effects_mode": self.effects_mode,
            "rmse": self.rmse,
            "rmse_long_term": self.rmse_long_term,
            "rmse_short_term": self.rmse_short_term,
            "per_site": [p.__dict__ for p in self.per_site],
            "fold_errors": dict(self.fold_errors),
        }


def weighted_split_report(report: LoocvReport) -> tuple[float | None, float | None]:
    """(RMSE over long-term sites, RMSE over short-term sites); None if a
    partition has no sites."""
    return report.rmse_long_term, report.rmse_short_term


def haversine_km(lat1, lon1, lat2, lon2) -> float:
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_KM * math.asin(min(1.0, math.sqrt(h)))


def _year_then_site_mean(years: np.ndarray, values: np.ndarray) -> float:
    by_year = [values[years == y].mean() for y in np.unique(years)]
    return float(np.mean(by_year))


def observed_site_means(rows: Sequence[CalibrationRow]) -> dict[str, float]:
    groups: dict[str, list] = defaultdict(list)
    for r in rows:
        groups[r.site].append(r)
    return {s: _year_then_site_mean(np.array([r.year for r in rs]),
                                    np.array([r.exp_effect for r in rs]))
            for s, rs in groups.items()}


def _design(rows: Sequence[CalibrationRow], names: Sequence[str], tillage: bool) -> np.ndarray:
    cols = [np.ones(len(rows))]
    for name in names:
        if name == "sat":
            cols.append(np.array([r.sat_effect for r in rows], dtype=np.float64))
        else:
            cols.append(np.array([r.weather_value(name) for r in rows], dtype=np.float64))
    if tillage:
        cols.append(np.array([r.tillage for r in rows], dtype=np.float64))
    return np.column_stack(cols)


class _FoldError(RuntimeError):
    pass


def _fit_predict(train: Sequence[CalibrationRow], test: Sequence[CalibrationRow],
                 variant: ModelVariant, year_blups: bool) -> np.ndarray:
    mode = variant.effects_mode
    use_tillage = mode is EffectsMode.MIXED_WITH_TILLAGE
    if use_tillage and len({r.tillage for r in train}) < 2:
        log.info("tillage is constant in the training sites; indicator dropped for this fold")
        use_tillage = False
    names = variant.regressors()
    X = _design(train, names, use_tillage)
    y = np.array([r.exp_effect for r in train], dtype=np.float64)
    Xn = _design(test, names, use_tillage)
    n_sites = len({r.site for r in train})
    if n_sites < 2:
        raise _FoldError(f"only {n_sites} training site(s)")
    if len(y) <= X.shape[1]:
        raise _FoldError(f"{len(y)} rows for {X.shape[1]} coefficients")
    if np.linalg.matrix_rank(X) < X.shape[1]:
        raise _FoldError("singular design")
    if mode is EffectsMode.LINEAR:
        beta, *_ = linalg.lstsq(X, y)
        return Xn @ beta
    site = np.array([r.site for r in train])
    year = np.array([r.year for r in train])
    res = fit_reml(y, X, {"site": site, "year": year}, with_blups=year_blups)
    pred = Xn @ res.beta
    if year_blups and res.blups:
        shift = res.blups["year"]
        pred = pred + np.array([shift.get(r.year, 0.0) for r in test])
    return pred


def loo_site_cv(rows: Sequence[CalibrationRow], variant: ModelVariant, *,
                sites: Mapping[str, tuple[float, float]] | None = None,
                site_years: Mapping[str, int] | None = None,
                year_blups: bool = False,
                forced_coefficients: tuple[float, float] | None = None) -> LoocvReport:
    """Leave-one-site-out RMSE of a predictor of site mean experimental effects.

    Args:
        rows: calibration rows (one per experimental pair).
        variant: model variant and random-effects mode.
        sites: site -> (lat, lon); required for nearest_experiment.
        site_years: site -> experiment duration in years, used for the
            long/short partition; defaults to the number of distinct row years.
        year_blups: add training-year random effects at held-out rows whose
            year appears in the training sites (otherwise random effects are 0).
        forced_coefficients: for hybrid_calibration, skip fitting and predict
            a + b * sat with the given (a, b).
    """
    # canonical row order: fits and predictions do not depend on input order
    rows = sorted(rows, key=lambda r: (str(r.site), r.year, r.pair, r.exp_effect, r.sat_effect))
    by_site: dict[str, list[CalibrationRow]] = defaultdict(list)
    for r in rows:
        by_site[r.site].append(r)
    site_ids = sorted(by_site)
    if len(site_ids) < 3:
        raise CalibrationError(f"need at least 3 sites, got {len(site_ids)}")
    if variant.kind == "nearest_experiment":
        missing = [s for s in site_ids if not sites or s not in sites]
        if missing:
            raise ValueError(f"nearest_experiment needs coordinates for site(s) {missing}")
    observed = observed_site_means(rows)
    durations = dict(site_years or {})
    for s in site_ids:
        durations.setdefault(s, len({r.year for r in by_site[s]}))

    report = LoocvReport(variant.name, variant.effects_mode.value, [], {}, durations)
    for held in site_ids:
        test = by_site[held]
        train = [r for r in rows if r.site != held]
        years = np.array([r.year for r in test])
        try:
            if variant.kind == "satellite_only":
                pred = np.array([r.sat_effect for r in test])
            elif variant.kind == "nearest_experiment":
                lat, lon = sites[held]
                nearest = min((s for s in site_ids if s != held),
                              key=lambda s: (haversine_km(lat, lon, *sites[s]), s))
                pred = np.full(len(test), observed[nearest])
            elif forced_coefficients is not None and variant.kind == "hybrid_calibration":
                a, b = forced_coefficients
                pred = a + b * np.array([r.sat_effect for r in test])
            else:
                pred = _fit_predict(train, test, variant, year_blups)
        except (_FoldError, RemlError, CalibrationError, ValueError, np.linalg.LinAlgError) as exc:
            report.fold_errors[held] = str(exc)
            log.warning("fold %s (%s/%s) excluded: %s", held, variant.name,
                        variant.effects_mode.value, exc)
            continue
        predicted = _year_then_site_mean(years, np.asarray(pred, dtype=np.float64))
        err = (predicted - observed[held]) ** 2
        report.per_site.append(SitePrediction(held, predicted, observed[held], err,
                                              len(np.unique(years))))
    return report


def table_report(rows: Sequence[CalibrationRow], *,
                 sites: Mapping[str, tuple[float, float]] | None = None,
                 site_years: Mapping[str, int] | None = None,
                 variants: Sequence[str] = TABLE_VARIANTS,
                 modes: Sequence[str] = tuple(m.value for m in EffectsMode),
                 year_blups: bool = False) -> dict:
    """RMSE table: one row per effects mode, one column per variant, with the
    long/short-term split alongside."""
    table: dict[str, dict] = {}
    cache: dict[str, LoocvReport] = {}
    for mode in modes:
        row: dict[str, dict] = {}
        for name in variants:
            variant = ModelVariant.parse(name, mode)
            # unfitted variants do not depend on the mode
            if not variant.fitted and name in cache:
                rep = cache[name]
            else:
                rep = loo_site_cv(rows, variant, sites=sites, site_years=site_years,
                                  year_blups=year_blups)
                if not variant.fitted:
                    cache[name] = rep
            row[name] = {"rmse": rep.rmse, "rmse_long_term": rep.rmse_long_term,
                         "rmse_short_term": rep.rmse_short_term,
                         "n_sites": len(rep.per_site),
                         "fold_errors": dict(rep.fold_errors),
                         "per_site": [p.__dict__ for p in rep.per_site]}
        table[mode] = row
    return {"columns": list(variants), "rows": list(modes), "rmse": table}


def read_sites(path: str | Path) -> dict[str, tuple[float, float]]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                out[row["site"]] = (float(row["lat"]), float(row["lon"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ValueError(f"{path} line {line}: {exc}") from None
    return out
