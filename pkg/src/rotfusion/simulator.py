"""Synthetic observational panels and paired experiments with a known effect
surface, used as ground truth for every bias and accuracy check.

Generative model
----------------
Covariates (one draw per pixel-year or experiment site-year)::

    lat ~ U(37, 47), lon ~ U(-97, -82), year ~ U{first_year..last_year}
    gdd = 2900 - 70 (lat - 37) + s_year + N(0, 80),   s_year ~ N(0, 100) per year
    edd = max(0, 45 + 0.12 (gdd - 2550) + N(0, 20))
    early_precip, prev_early_precip ~ Gamma(8, 30)
    growing_precip, prev_growing_precip ~ Gamma(10, 45)
    rootznaws ~ U(100, 300), aws0_100 ~ U(100, 250)
    nccpi_corn ~ Beta(5, 3), nccpi_soy = clip(nccpi_corn + N(0, 0.05), 0, 1)

With g = (gdd - 2550) / 235 the effect surfaces are::

    constant:     tau(x) = tau0
    linear_gdd:   tau(x) = tau0 + tau_slope * g
    two_stratum:  tau(x) = tau_high if g > 0 else tau_low

Baseline yield (level 10 t/ha for corn, 3.5 for soy)::

    baseline(x) = level * (1 + 0.08 tanh(g) - 0.02 (edd - 50) / 30
                             + 0.05 (growing_precip - 450) / 150
                             + 0.10 (nccpi - 0.6) / 0.15)

Observational pixels: true rotation W ~ Bernoulli(p(x)) with
logit p(x) = logit(propensity_offset) + propensity_strength * (lon + 89.5) / 4.33
(the standardized longitude, independent of gdd); fertilizer F = 1 (full rate)
with P(F = 0 | W = 1) = 1/2 + assoc and P(F = 0 | W = 0) = 1/2 - assoc;
yield = max(0, baseline + W tau + gamma F + N(0, yield_noise_obs)); the
recorded rotation is flipped with probability eps.

Experiments: each site has a location and a run of consecutive years; each
replicate holds one treated and one control subplot on the same block with
full fertilizer. The treated subplot adds tau(x_st) + alpha_s + beta_t, where
alpha_s ~ N(0, site_sd^2) and beta_t ~ N(0, year_sd^2) is shared across sites by
calendar year.

Under randomized rotation (propensity_strength = 0) the forest targets
(1 - 2 eps) (tau(x) - 2 gamma assoc) when W is balanced, so the implied
calibration is exp = a + b sat with a = 2 gamma assoc and b = 1 / (1 - 2 eps).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _rng
from .calibration.calibrate import CalibrationRow
from .ingestion import (COVARIATE_NAMES, CovariateVector, ExperimentalSubplot,
                        ObservationalPixel, crop_arms, write_experimental,
                        write_observational)

TAU_SPECS = ("constant", "linear_gdd", "two_stratum")
GDD_CENTER = 2550.0
GDD_SCALE = 235.0
LON_CENTER = -89.5
LON_SCALE = 4.33          # sd of U(-97, -82)
YIELD_LEVEL = {"corn": 10.0, "soy": 3.5}


@dataclass(frozen=True)
class SimulationConfig:
    n_pixels: int = 20_000
    n_sites: int = 11
    years_per_site: int | tuple[int, ...] = 5
    pairs_per_site_year: int = 3
    crop: str = "corn"
    tau_spec: str = "constant"
    tau0: float = 1.0
    tau_slope: float = 0.0
    tau_high: float = 2.0
    tau_low: float = 0.5
    confounder_gamma: float = 0.0
    confounder_assoc: float = 0.0
    misclass_eps: float = 0.0
    propensity_strength: float = 0.0
    propensity_offset: float = 0.5
    yield_noise_obs: float = 1.0
    yield_noise_exp: float = 0.5
    site_sd: float = 0.0
    year_sd: float = 0.0
    first_year: int = 2000
    last_year: int = 2018
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.years_per_site, list):
            object.__setattr__(self, "years_per_site", tuple(self.years_per_site))
        if self.n_pixels < 0 or self.n_sites < 0 or self.pairs_per_site_year < 1:
            raise ValueError("counts must be non-negative and pairs_per_site_year >= 1")
        if self.crop not in YIELD_LEVEL:
            raise ValueError(f"crop must be corn or soy, got {self.crop!r}")
        if self.tau_spec not in TAU_SPECS:
            raise ValueError(f"tau_spec must be one of {TAU_SPECS}, got {self.tau_spec!r}")
        for name in ("yield_noise_obs", "yield_noise_exp", "site_sd", "year_sd"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 <= self.misclass_eps < 0.5:
            raise ValueError("misclass_eps must lie in [0, 0.5)")
        if not 0.0 <= self.confounder_assoc <= 0.5:
            raise ValueError("confounder_assoc must lie in [0, 0.5]")
        if not 0.0 < self.propensity_offset < 1.0:
            raise ValueError("propensity_offset must lie in (0, 1)")
        if self.first_year > self.last_year:
            raise ValueError("first_year must not exceed last_year")
        span = self.last_year - self.first_year + 1
        if any(d < 1 or d > span for d in self.site_durations()):
            raise ValueError(f"site durations must lie in [1, {span}]")
        _rng.check_seed(self.seed)

    def site_durations(self) -> tuple[int, ...]:
        if isinstance(self.years_per_site, int):
            return (self.years_per_site,) * self.n_sites
        if len(self.years_per_site) != self.n_sites:
            raise ValueError("years_per_site must have one entry per site")
        return tuple(int(d) for d in self.years_per_site)

    def to_dict(self) -> dict:
        d = asdict(self)
        if isinstance(self.years_per_site, tuple):
            d["years_per_site"] = list(self.years_per_site)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationConfig":
        kwargs = {}
        names = {f.name for f in fields(cls)}
        for key, value in d.items():
            if key not in names:
                raise ValueError(f"unknown simulation field {key!r}")
            kwargs[key] = _coerce(key, value, getattr(cls(), key))
        return cls(**kwargs)


def _coerce(key, value, default):
    if key == "years_per_site":
        if isinstance(value, (list, tuple)):
            return tuple(int(v) for v in value)
        text = str(value).strip()
        if "," in text:
            return tuple(int(v) for v in text.split(",") if v.strip())
        return int(text)
    if isinstance(default, bool):
        return str(value).lower() in ("1", "true", "yes")
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return str(value)


# ---------------------------------------------------------------- effect model

def standardized_gdd(gdd) -> np.ndarray:
    return (np.asarray(gdd, dtype=np.float64) - GDD_CENTER) / GDD_SCALE


def true_tau(config: SimulationConfig, X) -> np.ndarray:
    """True effect at covariate rows ``X`` (n, 13) in the standard column order."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    g = standardized_gdd(X[:, COVARIATE_NAMES.index("gdd")])
    if config.tau_spec == "constant":
        return np.full(len(g), config.tau0)
    if config.tau_spec == "linear_gdd":
        return config.tau0 + config.tau_slope * g
    return np.where(g > 0, config.tau_high, config.tau_low)


def baseline_yield(crop: str, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    col = {n: X[:, k] for k, n in enumerate(COVARIATE_NAMES)}
    nccpi = col["nccpi_corn"] if crop == "corn" else col["nccpi_soy"]
    g = standardized_gdd(col["gdd"])
    rel = (1.0 + 0.08 * np.tanh(g) - 0.02 * (col["edd"] - 50.0) / 30.0
           + 0.05 * (col["growing_precip"] - 450.0) / 150.0 + 0.10 * (nccpi - 0.6) / 0.15)
    return YIELD_LEVEL[crop] * rel


def propensity(config: SimulationConfig, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    z = (X[:, COVARIATE_NAMES.index("lon")] - LON_CENTER) / LON_SCALE
    off = math.log(config.propensity_offset / (1 - config.propensity_offset))
    return 1.0 / (1.0 + np.exp(-(off + config.propensity_strength * z)))


def expected_confounding_bias(config: SimulationConfig) -> float:
    """gamma * (E[F | W=1] - E[F | W=0]) = -2 gamma assoc."""
    return config.confounder_gamma * ((0.5 - config.confounder_assoc)
                                      - (0.5 + config.confounder_assoc))


def implied_calibration(config: SimulationConfig) -> tuple[float, float]:
    """(a, b) linking the observational estimand to the true effect under a
    balanced randomized rotation."""
    return -expected_confounding_bias(config), 1.0 / (1.0 - 2.0 * config.misclass_eps)


@dataclass
class SimulatedTruth:
    config: SimulationConfig
    true_ate: float
    expected_confounding_bias: float
    implied_a: float
    implied_b: float
    site_effects: dict[str, float] = field(default_factory=dict)
    year_effects: dict[int, float] = field(default_factory=dict)

    def true_tau(self, X) -> np.ndarray:
        return true_tau(self.config, X)

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "true_ate": self.true_ate,
            "expected_confounding_bias": self.expected_confounding_bias,
            "implied_a": self.implied_a,
            "implied_b": self.implied_b,
            "site_effects": self.site_effects,
            "year_effects": {str(k): v for k, v in sorted(self.year_effects.items())},
        }


# ---------------------------------------------------------------- generation

def _covariates(rng, lat, lon, year, year_shock, first_year) -> np.ndarray:
    n = len(lat)
    gdd = 2900.0 - 70.0 * (lat - 37.0) + year_shock[year - first_year] + rng.normal(0, 80, n)
    gdd = np.maximum(gdd, 0.0)
    edd = np.maximum(0.0, 45.0 + 0.12 * (gdd - GDD_CENTER) + rng.normal(0, 20, n))
    early = rng.gamma(8.0, 30.0, n)
    growing = rng.gamma(10.0, 45.0, n)
    prev_early = rng.gamma(8.0, 30.0, n)
    prev_growing = rng.gamma(10.0, 45.0, n)
    rootz = rng.uniform(100.0, 300.0, n)
    aws = rng.uniform(100.0, 250.0, n)
    nccpi_corn = rng.beta(5.0, 3.0, n)
    nccpi_soy = np.clip(nccpi_corn + rng.normal(0, 0.05, n), 0.0, 1.0)
    return np.column_stack([lat, lon, year.astype(np.float64), gdd, edd, early, growing,
                            prev_early, prev_growing, rootz, aws, nccpi_corn, nccpi_soy])


@dataclass
class ObservationalArrays:
    X: np.ndarray
    w_true: np.ndarray
    w_obs: np.ndarray
    fertilizer: np.ndarray
    y: np.ndarray
    tau: np.ndarray


@dataclass
class SimulationOutput:
    config: SimulationConfig
    observational: ObservationalArrays
    pixels: list[ObservationalPixel]
    subplots: list[ExperimentalSubplot]
    truth: SimulatedTruth
    sites: dict[str, tuple[float, float]]
    site_covariates: dict[tuple[str, int], np.ndarray]

    def write(self, out_dir: str | Path) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "pixels": out / "pixels.csv",
            "subplots": out / "subplots.csv",
            "truth": out / "truth.json",
            "sites": out / "sites.csv",
            "site_covariates": out / "site_covariates.csv",
        }
        write_observational(paths["pixels"], self.pixels)
        write_experimental(paths["subplots"], self.subplots)
        with open(paths["truth"], "w", encoding="utf-8") as fh:
            json.dump(self.truth.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")
        write_sites(paths["sites"], self.sites)
        write_site_covariates(paths["site_covariates"], self.site_covariates)
        return paths


def _years(config: SimulationConfig) -> np.ndarray:
    return np.arange(config.first_year, config.last_year + 1)


def simulate(config: SimulationConfig) -> SimulationOutput:
    """Draw one synthetic dataset.

    Shared year shocks, the observational panel and the experiments use three
    separate streams of the seed, and within the panel every draw happens
    regardless of eps, gamma or assoc, so datasets that differ only in those
    knobs share all other randomness (flips at larger eps are supersets of
    flips at smaller eps).
    """
    years = _years(config)
    shared = _rng.unit_generator(config.seed, _rng.STREAM_SIMULATOR, 0)
    year_shock = shared.normal(0.0, 100.0, len(years))
    year_effect = shared.normal(0.0, 1.0, len(years)) * config.year_sd

    obs = _observational(config, year_shock)
    treated, control = crop_arms(config.crop)
    pixels = []
    for i in range(len(obs.y)):
        rot = treated if obs.w_obs[i] else control
        cov = CovariateVector(*(float(v) for v in obs.X[i]))
        pixels.append(ObservationalPixel(f"p{i:07d}", int(obs.X[i, 2]), rot,
                                         float(obs.y[i]), cov))

    subplots, sites, site_cov, site_effects = _experiments(config, year_shock, year_effect)
    truth = SimulatedTruth(
        config=config,
        true_ate=float(obs.tau.mean()) if len(obs.tau) else float("nan"),
        expected_confounding_bias=expected_confounding_bias(config),
        implied_a=implied_calibration(config)[0],
        implied_b=implied_calibration(config)[1],
        site_effects=site_effects,
        year_effects={int(y): float(e) for y, e in zip(years, year_effect)},
    )
    return SimulationOutput(config, obs, pixels, subplots, truth, sites, site_cov)


def _observational(config: SimulationConfig, year_shock) -> ObservationalArrays:
    rng = _rng.unit_generator(config.seed, _rng.STREAM_SIMULATOR, 1)
    n = config.n_pixels
    lat = rng.uniform(37.0, 47.0, n)
    lon = rng.uniform(-97.0, -82.0, n)
    year = rng.integers(config.first_year, config.last_year + 1, n)
    X = _covariates(rng, lat, lon, year, year_shock, config.first_year)
    u_treat = rng.random(n)
    u_fert = rng.random(n)
    noise = rng.normal(0.0, 1.0, n)
    u_flip = rng.random(n)

    w = (u_treat < propensity(config, X)).astype(np.int64)
    p_reduced = np.where(w == 1, 0.5 + config.confounder_assoc, 0.5 - config.confounder_assoc)
    fert = (u_fert >= p_reduced).astype(np.int64)
    tau = true_tau(config, X)
    y = baseline_yield(config.crop, X) + w * tau + config.confounder_gamma * fert
    y = np.maximum(y + config.yield_noise_obs * noise, 0.0)
    flip = u_flip < config.misclass_eps
    w_obs = np.where(flip, 1 - w, w)
    return ObservationalArrays(X, w, w_obs, fert, y, tau)


def _experiments(config: SimulationConfig, year_shock, year_effect):
    rng = _rng.unit_generator(config.seed, _rng.STREAM_SIMULATOR, 2)
    treated, control = crop_arms(config.crop)
    durations = config.site_durations()
    subplots: list[ExperimentalSubplot] = []
    sites: dict[str, tuple[float, float]] = {}
    site_cov: dict[tuple[str, int], np.ndarray] = {}
    site_effects: dict[str, float] = {}
    width = max(2, len(str(config.n_sites)))
    for s, dur in enumerate(durations):
        name = f"S{s + 1:0{width}d}"
        lat = float(rng.uniform(38.0, 46.0))
        lon = float(rng.uniform(-96.0, -83.0))
        start = int(rng.integers(config.first_year, config.last_year - dur + 2))
        alpha = float(rng.normal(0.0, 1.0)) * config.site_sd
        sites[name] = (lat, lon)
        site_effects[name] = alpha
        yrs = np.arange(start, start + dur)
        X = _covariates(rng, np.full(dur, lat), np.full(dur, lon), yrs, year_shock,
                        config.first_year)
        base = baseline_yield(config.crop, X) + config.confounder_gamma
        tau = true_tau(config, X)
        R = config.pairs_per_site_year
        block = rng.normal(0.0, 0.3, (dur, R))
        noise = rng.normal(0.0, 1.0, (dur, R, 2)) * config.yield_noise_exp
        for k, yr in enumerate(yrs):
            site_cov[(name, int(yr))] = X[k]
            shift = tau[k] + alpha + year_effect[yr - config.first_year]
            for r in range(R):
                till = "till" if r % 2 == 0 else "notill"
                common = base[k] + block[k, r]
                for arm, rot, extra in ((0, treated, shift), (1, control, 0.0)):
                    subplots.append(ExperimentalSubplot(
                        subplot_id=len(subplots), site=name, year=int(yr),
                        replicate=str(r + 1), rotation=rot, tillage=till, fertilizer="full",
                        drainage="none",
                        yield_tha=float(max(common + extra + noise[k, r, arm], 0.0)),
                        rotation_start_year=int(start - 1), in_region=True))
    return subplots, sites, site_cov, site_effects


# ---------------------------------------------------------------- benchmarks

PAPER_LIKE_DURATIONS = (15, 15, 15, 15, 4, 4, 4, 4, 4, 4, 5)
PAPER_LIKE_PIXELS = 180_000


def paper_like_config(seed: int = 0, scale: float = 0.1, **overrides) -> SimulationConfig:
    """Eleven sites (four 15-year, seven 4-5-year; 89 site-years) and an
    observational panel of round(180,000 * scale) pixel-years."""
    params = dict(
        n_pixels=int(round(PAPER_LIKE_PIXELS * scale)),
        n_sites=len(PAPER_LIKE_DURATIONS),
        years_per_site=PAPER_LIKE_DURATIONS,
        pairs_per_site_year=3,
        crop="corn",
        tau_spec="linear_gdd",
        tau0=1.0,
        tau_slope=-0.35,
        confounder_gamma=0.5,
        confounder_assoc=0.2,
        misclass_eps=0.15,
        yield_noise_obs=1.5,
        yield_noise_exp=0.5,
        site_sd=0.15,
        year_sd=0.1,
        first_year=2000,
        last_year=2018,
        seed=seed,
    )
    params.update(overrides)
    return SimulationConfig(**params)


def paper_like_benchmark(seed: int = 0, scale: float = 0.1, **overrides) -> SimulationOutput:
    return simulate(paper_like_config(seed, scale, **overrides))


def simulate_calibration_rows(n_sites: int, n_years: int, pairs: int, *, a: float, b: float,
                              site_sd: float, year_sd: float, resid_sd: float,
                              sat_mean: float = 0.3, sat_site_sd: float = 0.3,
                              sat_year_sd: float = 0.15, seed: int = 0,
                              stream_counter: int = 3) -> list[CalibrationRow]:
    """Rows from exp = a + b * sat + alpha_s + beta_t + eps directly, with one
    sat value per site-year (a site level plus a site-year deviation)."""
    rng = _rng.unit_generator(seed, _rng.STREAM_SIMULATOR, stream_counter)
    site_level = sat_mean + rng.normal(0.0, sat_site_sd, n_sites)
    sat = site_level[:, None] + rng.normal(0.0, sat_year_sd, (n_sites, n_years))
    alpha = rng.normal(0.0, site_sd, n_sites)
    beta = rng.normal(0.0, year_sd, n_years)
    eps = rng.normal(0.0, resid_sd, (n_sites, n_years, pairs))
    rows = []
    for s in range(n_sites):
        for t in range(n_years):
            for j in range(pairs):
                exp = a + b * sat[s, t] + alpha[s] + beta[t] + eps[s, t, j]
                rows.append(CalibrationRow(f"S{s + 1:03d}", 2000 + t, j + 1, float(exp),
                                           float(sat[s, t])))
    return rows


# ---------------------------------------------------------------- side tables

def write_sites(path: str | Path, sites: dict[str, tuple[float, float]]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["site", "lat", "lon"])
        for name in sorted(sites):
            lat, lon = sites[name]
            writer.writerow([name, repr(float(lat)), repr(float(lon))])


def write_site_covariates(path: str | Path, table: dict[tuple[str, int], np.ndarray]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["site"] + list(COVARIATE_NAMES))
        for (site, year) in sorted(table):
            x = table[(site, year)]
            writer.writerow([site] + [str(year) if n == "year" else repr(float(v))
                                      for n, v in zip(COVARIATE_NAMES, x)])


def read_site_covariates(path: str | Path) -> dict[tuple[str, int], np.ndarray]:
    out = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("site",) + COVARIATE_NAMES if c not in (reader.fieldnames or [])]
        if missing:
            raise ValueError(f"{path}: missing column(s) {', '.join(missing)}")
        for line, row in enumerate(reader, start=2):
            try:
                x = np.array([float(row[n]) for n in COVARIATE_NAMES])
                out[(row["site"], int(float(row["year"])))] = x
            except (TypeError, ValueError) as exc:
                raise ValueError(f"{path} line {line}: {exc}") from None
    return out

