"""Calibration of observational (forest) effects toward experimental effects.

Mixed mode fits exp = a + b * sat + alpha_site + beta_year + eps by REML and
predicts a + b * sat at new locations. Additive mode only shifts sat by the
mean experimental-minus-observational gap.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..validation.bootstrap import cluster_bootstrap, mean_difference
from .reml import RemlError, fit_reml

Z95 = 1.959963984540054

WEATHER_NAMES = ("early_precip", "growing_precip", "gdd", "edd")


@dataclass(frozen=True)
class CalibrationRow:
    site: str
    year: int
    pair: int
    exp_effect: float
    sat_effect: float
    tillage: int = 1          # 1 = tilled, 0 = no-till
    weather: tuple = ()       # values aligned with WEATHER_NAMES, if known

    def weather_value(self, name: str) -> float:
        if not self.weather:
            raise ValueError(f"row {self.site}/{self.year}/{self.pair} has no weather covariates")
        return float(self.weather[WEATHER_NAMES.index(name)])


class CalibrationError(ValueError):
    """Calibration data cannot support the requested fit."""


@dataclass
class MixedCalibrationFit:
    a: float
    b: float
    var_site: float
    var_year: float
    var_resid: float
    se_a: float
    se_b: float
    cov_ab: float
    n_sites: int
    n_years: int
    n_rows: int
    converged: bool
    status: str
    loglik: float
    trace: list[float] = field(default_factory=list)

    @property
    def ci_a(self) -> tuple[float, float]:
        return self.a - Z95 * self.se_a, self.a + Z95 * self.se_a

    @property
    def ci_b(self) -> tuple[float, float]:
        return self.b - Z95 * self.se_b, self.b + Z95 * self.se_b

    def to_dict(self) -> dict:
        d = {k: getattr(self, k) for k in ("a", "b", "var_site", "var_year", "var_resid", "se_a",
                                           "se_b", "cov_ab", "n_sites", "n_years", "n_rows",
                                           "converged", "status")}
        d["loglik"] = self.loglik if math.isfinite(self.loglik) else None
        d["ci_a"] = list(self.ci_a)
        d["ci_b"] = list(self.ci_b)
        d["trace"] = list(self.trace)
        return d

    def summary(self) -> str:
        lo_a, hi_a = self.ci_a
        lo_b, hi_b = self.ci_b
        return (f"a = {self.a:.2f} (95% CI = [{lo_a:.2f},{hi_a:.2f}]), "
                f"b = {self.b:.2f} (95% CI = [{lo_b:.2f},{hi_b:.2f}])")


@dataclass
class AdditiveCalibrationFit:
    delta: float
    se_delta: float
    ci_low: float
    ci_high: float
    n_rows: int
    n_clusters: int
    B: int
    seed: int

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    def summary(self) -> str:
        return f"delta = {self.delta:.3f} t/ha (95% CI = [{self.ci_low:.2f},{self.ci_high:.2f}])"


def _arrays(rows: Sequence[CalibrationRow]):
    exp = np.array([r.exp_effect for r in rows], dtype=np.float64)
    sat = np.array([r.sat_effect for r in rows], dtype=np.float64)
    site = np.array([str(r.site) for r in rows])
    year = np.array([int(r.year) for r in rows])
    return exp, sat, site, year


def fit_mixed_calibration(rows: Sequence[CalibrationRow], *, max_iter: int = 200,
                          zero_random_effects: bool = False) -> MixedCalibrationFit:
    """REML fit of exp = a + b * sat with crossed site and year intercepts.

    ``zero_random_effects`` pins both random-effect variances at zero, which
    reduces the fit to ordinary least squares.
    """
    rows = list(rows)
    if len(rows) < 4:
        raise CalibrationError(f"need at least 4 rows, got {len(rows)}")
    exp, sat, site, year = _arrays(rows)
    n_sites = len(np.unique(site))
    n_years = len(np.unique(year))
    if n_sites < 2 or n_years < 2:
        raise CalibrationError(f"need at least 2 sites and 2 years, got {n_sites} and {n_years}")
    if not (np.all(np.isfinite(exp)) and np.all(np.isfinite(sat))):
        raise CalibrationError("effects must be finite")
    if np.ptp(sat) == 0:
        raise CalibrationError("singular design: all satellite effects are equal")
    X = np.column_stack([np.ones_like(sat), sat])
    fixed = {"site": -np.inf, "year": -np.inf} if zero_random_effects else None
    res = fit_reml(exp, X, {"site": site, "year": year}, max_iter=max_iter, fixed_theta=fixed)
    vc = res.var_components
    return MixedCalibrationFit(
        a=float(res.beta[0]), b=float(res.beta[1]),
        var_site=vc["site"], var_year=vc["year"], var_resid=vc["resid"],
        se_a=float(res.se_beta[0]), se_b=float(res.se_beta[1]),
        cov_ab=float(res.cov_beta[0, 1]),
        n_sites=n_sites, n_years=n_years, n_rows=len(rows),
        converged=res.converged, status=res.status, loglik=res.loglik, trace=res.trace,
    )


def predict_calibrated(fit: MixedCalibrationFit, sat_effect):
    """a + b * sat; random effects are zero at new locations."""
    out = fit.a + fit.b * np.asarray(sat_effect, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


def fit_additive_calibration(rows: Sequence[CalibrationRow], *, B: int = 1000,
                             seed: int = 0) -> AdditiveCalibrationFit:
    """delta = mean(exp) - mean(sat), with a site-cluster bootstrap SE and CI."""
    rows = list(rows)
    if not rows:
        raise CalibrationError("need at least one row")
    exp, sat, site, _ = _arrays(rows)
    delta = float(exp.mean() - sat.mean())
    boot = cluster_bootstrap(site, {"exp": exp, "sat": sat}, mean_difference, B=B, seed=seed)
    se = float(np.std(boot.replicates, ddof=1)) if len(boot.replicates) > 1 else 0.0
    return AdditiveCalibrationFit(delta, se, boot.ci_low, boot.ci_high, len(rows),
                                  boot.n_clusters, B, int(seed))


def predict_additive(fit: AdditiveCalibrationFit, sat_effect):
    out = fit.delta + np.asarray(sat_effect, dtype=np.float64)
    return float(out) if out.ndim == 0 else out


# ------------------------------------------------------------------ row files

ROW_COLUMNS = ("site", "year", "pair", "exp_effect", "sat_effect")
OPTIONAL_COLUMNS = ("tillage",) + WEATHER_NAMES

NO_TILL = {"no-till", "notill", "no_till", "nt", "0", "none"}


def tillage_indicator(value: str) -> int:
    """1 when the subplot was tilled, 0 for no-till."""
    return 0 if str(value).strip().lower() in NO_TILL else 1


def write_rows(path: str | Path, rows: Iterable[CalibrationRow]) -> None:
    rows = list(rows)
    has_weather = bool(rows) and all(r.weather for r in rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = list(ROW_COLUMNS) + ["tillage"] + (list(WEATHER_NAMES) if has_weather else [])
        writer.writerow(header)
        for r in rows:
            line = [r.site, r.year, r.pair, repr(float(r.exp_effect)),
                    repr(float(r.sat_effect)), r.tillage]
            if has_weather:
                line += [repr(float(v)) for v in r.weather]
            writer.writerow(line)


def read_rows(path: str | Path) -> list[CalibrationRow]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in ROW_COLUMNS if c not in header]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        has_weather = all(c in header for c in WEATHER_NAMES)
        for line, row in enumerate(reader, start=2):
            try:
                weather = tuple(float(row[c]) for c in WEATHER_NAMES) if has_weather else ()
                out.append(CalibrationRow(
                    row["site"], int(row["year"]), int(row["pair"]), float(row["exp_effect"]),
                    float(row["sat_effect"]),
                    tillage_indicator(row["tillage"]) if "tillage" in header else 1,
                    weather))
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path} line {line}: {exc}") from None
    return out


__all__ = [
    "AdditiveCalibrationFit", "CalibrationError", "CalibrationRow", "MixedCalibrationFit",
    "RemlError", "fit_additive_calibration", "fit_mixed_calibration", "predict_additive",
    "predict_calibrated", "read_rows", "tillage_indicator", "write_rows",
]
