"""Stage functions behind the command line: each reads the files of the
previous stage, writes its own outputs and returns their paths.

Every JSON output carries ``schema_version`` and a ``provenance`` block (tool
version, the command, the seeds used and the resolved config echo). Nothing
time-dependent is recorded, so identical inputs, config and seed give
identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__
from .calibration import calibrate as cal
from .config import PipelineConfig
from .experimental import PairedDifference, pair_subplots, site_year_means, write_pairs
from .forest import CausalForestModel, fit_causal_forest, trim_by_propensity
from .forest.io import load_model, save_model
from .ingestion import (COVARIATE_NAMES, SchemaError, apply_experiment_filters, load_experimental,
                        load_observational, pixel_arrays, record_fields)
from .simulator import read_site_covariates
from .validation.bootstrap import cluster_bootstrap
from .validation.loocv import read_sites, table_report
from . import summaries

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
# settings that cannot change any output and so stay out of the echo
_NOT_ECHOED = ("threads", "log_level")


class DataError(ValueError):
    """Input data fail validation (exit code 3)."""


# ---------------------------------------------------------------- provenance

def config_echo(config: PipelineConfig) -> dict:
    return {k: v for k, v in config.to_dict().items() if k not in _NOT_ECHOED}


def provenance(command: str, config: PipelineConfig, inputs: dict | None = None) -> dict:
    return {
        "tool": "rotfusion",
        "version": __version__,
        "command": command,
        "seed": config.seed,
        "seeds": {"forest": config.seed, "bootstrap": config.seed, "simulation": config.seed},
        "config": config_echo(config),
        "inputs": {k: inputs[k] for k in sorted(inputs or {})},
    }


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def input_digest(path: str | Path) -> dict:
    return {"path": str(path), "sha256": sha256_file(path)}


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def write_json(path: str | Path, kind: str, payload: dict, prov: dict) -> Path:
    path = Path(path)
    doc = {"schema": f"rotfusion.{kind}", "schema_version": SCHEMA_VERSION, "provenance": prov}
    doc.update(payload)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(_clean(doc), fh, indent=2, sort_keys=True, allow_nan=False)
        fh.write("\n")
    return path


def write_manifest(out_dir: str | Path, files: Sequence[Path], prov: dict) -> Path:
    out_dir = Path(out_dir)
    entries = []
    for f in sorted(set(Path(p) for p in files)):
        entries.append({"file": f.relative_to(out_dir).as_posix(), "sha256": sha256_file(f),
                        "bytes": f.stat().st_size})
    entries.sort(key=lambda e: e["file"])
    return write_json(out_dir / "manifest.json", "manifest", {"files": entries}, prov)


# ---------------------------------------------------------------- tabular io

def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path: str | Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return Path(path)


def read_columns(path: str | Path) -> dict[str, list[str]]:
    """Column name -> raw string values."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        cols: dict[str, list[str]] = {h: [] for h in header}
        for line, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"{path} line {line}: expected {len(header)} fields, got {len(row)}")
            for h, v in zip(header, row):
                cols[h].append(v)
    return cols


def numeric_column(cols: dict[str, list[str]], name: str, path) -> np.ndarray:
    if name not in cols:
        raise SchemaError(f"{path}: missing column {name!r}")
    out = np.empty(len(cols[name]))
    for i, text in enumerate(cols[name]):
        try:
            out[i] = float(text)
        except ValueError:
            raise DataError(f"{path} line {i + 2}: non-numeric {name}: {text!r}") from None
        if not math.isfinite(out[i]):
            raise DataError(f"{path} line {i + 2}: non-finite {name}")
    return out


def read_covariates(path: str | Path) -> tuple[list[str], np.ndarray]:
    """(row ids, (n, 13) covariate matrix) from any CSV holding the covariate
    columns; row ids come from a ``row_id`` column or default to 0, 1, ..."""
    cols = read_columns(path)
    X = np.column_stack([numeric_column(cols, n, path) for n in COVARIATE_NAMES])
    n = X.shape[0]
    ids = cols["row_id"] if "row_id" in cols else [str(i) for i in range(n)]
    return ids, X.reshape(n, len(COVARIATE_NAMES))


# ---------------------------------------------------------------- stages

def fit_sat(config: PipelineConfig, pixels_path: str | Path, out: str | Path,
            command: str = "fit-sat") -> tuple[CausalForestModel, Path]:
    pixels, report = load_observational(pixels_path)
    if report.row_errors:
        log.warning("%d malformed row(s) in %s skipped; first: line %d: %s",
                    len(report.row_errors), pixels_path, report.row_errors[0]["line"],
                    report.row_errors[0]["error"])
    X, w, y, _ = pixel_arrays(pixels, config.crop)
    if len(y) == 0:
        raise DataError(f"{pixels_path}: no eligible {config.crop} pixel-years")
    if w.min() == w.max():
        raise DataError(f"{pixels_path}: only one rotation arm present for {config.crop}")
    model = fit_causal_forest(X, w, y, config.forest_config(), threads=config.threads)
    prov = provenance(command, config, {"pixels": input_digest(pixels_path)})
    meta = {"schema_version": SCHEMA_VERSION, "provenance": _clean(prov), "crop": config.crop,
            "validation": report.to_dict()}
    save_model(out, model, meta)
    return model, Path(out)


def predict(config: PipelineConfig, model_path: str | Path, covariates_path: str | Path,
            out: str | Path, *, flag_extrapolation: bool = False) -> Path:
    model, _ = load_model(model_path)
    ids, X = read_covariates(covariates_path)
    tau = model.predict_tau(X)
    prop = model.predict_propensity(X)
    flags = model.extrapolation_flags(X)
    if flags.any():
        log.warning("%d of %d rows lie outside the training covariate range", int(flags.sum()),
                    len(flags))
    header = ["row_id", "tau_hat", "propensity"] + (["extrapolated"] if flag_extrapolation else [])
    rows = (([i, float(t), float(p)] + ([int(f)] if flag_extrapolation else []))
            for i, t, p, f in zip(ids, tau, prop, flags))
    return write_csv(out, header, rows)


def pair_exp(config: PipelineConfig, subplots_path: str | Path, out: str | Path,
             command: str = "pair-exp") -> tuple[list[PairedDifference], list[Path]]:
    subplots, report = load_experimental(subplots_path)
    if report.row_errors:
        first = report.row_errors[0]
        raise DataError(f"{subplots_path}: {len(report.row_errors)} malformed row(s); "
                        f"line {first['line']}: {first['error']}")
    filt = apply_experiment_filters(subplots, config.crop, study_start=config.study_start,
                                    literal_corn_criterion=config.literal_corn_criterion)
    pairs, pairing = pair_subplots(filt.kept, config.crop)
    if not pairs:
        raise DataError(f"{subplots_path}: no treated/control pairs for {config.crop}")
    write_pairs(out, pairs)
    site_years, sites = site_year_means(pairs)
    side = Path(out).with_suffix(".json")
    write_json(side, "pairs_report", {
        "validation": report.to_dict(),
        "exclusions": [record_fields(e) for e in filt.exclusions],
        "rule_counts": filt.rule_counts(),
        "unmatched": [list(u) if isinstance(u, tuple) else u for u in pairing.unmatched],
        "notes": list(pairing.notes),
        "site_year_effects": [record_fields(s) for s in site_years],
        "site_effects": [record_fields(s) for s in sites],
    }, provenance(command, config, {"subplots": input_digest(subplots_path)}))
    return pairs, [Path(out), side]


def calibration_rows(pairs: Sequence[PairedDifference],
                     site_covariates: dict[tuple[str, int], np.ndarray],
                     model: CausalForestModel) -> list[cal.CalibrationRow]:
    """One row per experimental pair, with the forest effect at the site-year
    covariates and that site-year's weather."""
    keys = sorted({(p.site, p.year) for p in pairs})
    missing = [k for k in keys if k not in site_covariates]
    if missing:
        raise DataError(f"no covariates for {len(missing)} site-year(s), e.g. "
                        f"{missing[0][0]}/{missing[0][1]}")
    X = np.array([site_covariates[k] for k in keys])
    tau = dict(zip(keys, model.predict_tau(X)))
    idx = {n: COVARIATE_NAMES.index(n) for n in cal.WEATHER_NAMES}
    rows = []
    for p in pairs:
        x = site_covariates[(p.site, p.year)]
        rows.append(cal.CalibrationRow(
            p.site, p.year, p.pair_index, float(p.effect), float(tau[(p.site, p.year)]),
            cal.tillage_indicator(p.tillage),
            tuple(float(x[idx[n]]) for n in cal.WEATHER_NAMES)))
    return rows


def fit_calibration(config: PipelineConfig, rows: Sequence[cal.CalibrationRow]):
    if config.calibration_mode == "additive":
        return cal.fit_additive_calibration(rows, B=config.bootstrap_B, seed=config.seed)
    return cal.fit_mixed_calibration(rows)


def calibrate(config: PipelineConfig, rows: Sequence[cal.CalibrationRow], out: str | Path,
              inputs: dict, command: str = "calibrate"):
    fit = fit_calibration(config, rows)
    payload = {"mode": config.calibration_mode, "fit": fit.to_dict(), "summary": fit.summary()}
    write_json(out, "calibration_fit", payload, provenance(command, config, inputs))
    return fit, Path(out)


def load_fit(path: str | Path) -> tuple[str, dict]:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        return doc["mode"], doc["fit"]
    except KeyError:
        raise DataError(f"{path} is not a calibration fit") from None


def apply_fit(mode: str, fit: dict, sat) -> np.ndarray:
    sat = np.asarray(sat, dtype=np.float64)
    if mode == "additive":
        return fit["delta"] + sat
    return fit["a"] + fit["b"] * sat


def site_durations(rows: Sequence[cal.CalibrationRow]) -> dict[str, int]:
    years: dict[str, set] = {}
    for r in rows:
        years.setdefault(r.site, set()).add(r.year)
    return {s: len(v) for s, v in years.items()}


def validate(config: PipelineConfig, rows: Sequence[cal.CalibrationRow],
             sites_path: str | Path | None, out: str | Path, inputs: dict,
             variants: Sequence[str], modes: Sequence[str], command: str = "validate") -> Path:
    sites = read_sites(sites_path) if sites_path else None
    table = table_report(rows, sites=sites, site_years=site_durations(rows), variants=variants,
                         modes=modes, year_blups=config.year_blups)
    return write_json(out, "loocv_report", {"table": table},
                      provenance(command, config, inputs))


def bootstrap(config: PipelineConfig, stat: str, clusters, data: dict, out: str | Path,
              inputs: dict, B: int, command: str = "bootstrap") -> Path:
    res = cluster_bootstrap(clusters, data, stat, B=B, seed=config.seed)
    payload = res.to_dict()
    payload.pop("replicates", None)
    return write_json(out, "bootstrap", {"result": payload}, provenance(command, config, inputs))


def summary_outputs(config: PipelineConfig, kind: str, effects: np.ndarray,
                    columns: dict[str, np.ndarray], out: str | Path, inputs: dict, *,
                    covariate: str = "gdd", cluster: np.ndarray | None = None,
                    command: str = "summarize") -> list[Path]:
    """One summary of the effect column. ``columns`` supplies covariates by name."""
    prov = provenance(command, config, inputs)

    def col(name):
        if name not in columns:
            raise SchemaError(f"summary {kind} needs column {name!r}")
        return columns[name]

    if kind == "quintile":
        q = summaries.quintile_contrast(effects, col(covariate), config.quintile_q)
        return [write_json(out, "quintile", {"covariate": covariate, "q": config.quintile_q,
                                             "result": q.__dict__}, prov)]
    if kind in ("heatmap", "spatial"):
        if kind == "heatmap":
            grid = summaries.heatmap_grid(effects, col(config.heatmap_x), col(config.heatmap_y),
                                          config.heatmap_bins)
            extra = {"x": config.heatmap_x, "y": config.heatmap_y}
        else:
            grid = summaries.spatial_grid(effects, col("lat"), col("lon"), config.cell_km,
                                          area=config.cell_area)
            extra = {"x": "east_km", "y": "north_km"}
        extra.update({"schema": f"rotfusion.{kind}", "schema_version": SCHEMA_VERSION,
                      "provenance": prov, "recombined_mean": grid.recombined_mean()})
        side = summaries.write_grid(out, grid, _clean(extra))
        return [Path(out), side]
    if kind == "positivity":
        payload = {"fraction_positive": summaries.positivity_fraction(effects),
                   "n": int(len(effects))}
        if cluster is not None:
            res = summaries.positivity_with_ci(effects, cluster, B=config.bootstrap_B,
                                               seed=config.seed)
            payload["ci_low"], payload["ci_high"] = res.ci_low, res.ci_high
            payload["one_sided"] = True
        return [write_json(out, "positivity", payload, prov)]
    if kind == "trend":
        tr = summaries.temporal_trend(effects, col("year"))
        return [write_json(out, "trend", tr.to_dict(), prov)]
    raise ValueError(f"unknown summary kind {kind!r}")


# ---------------------------------------------------------------- full run

def required_inputs(config: PipelineConfig) -> dict[str, str]:
    need = {"pixels": config.pixels, "subplots": config.subplots,
            "site_covariates": config.site_covariates}
    if "nearest_experiment" in config.variant_list():
        need["sites"] = config.sites
    return need


def run(config: PipelineConfig, out_dir: str | Path, stage_hook=None) -> Path:
    """fit-sat, predict, pair-exp, calibrate, validate, bootstrap and summaries
    in order; returns the manifest path. ``stage_hook(name)`` is called as each
    stage starts so callers can name a failing stage."""
    hook = stage_hook or (lambda name: None)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {k: input_digest(v) for k, v in required_inputs(config).items()}
    files: list[Path] = []

    hook("fit-sat")
    model, model_path = fit_sat(config, config.pixels, out / "model.rfm", command="run")
    files.append(model_path)

    hook("predict")
    ids, X = read_covariates(config.pixels)
    tau = model.predict_tau(X)
    prop = model.predict_propensity(X)
    files.append(write_csv(out / "predictions.csv", ["row_id", "tau_hat", "propensity"],
                           ([i, float(t), float(p)] for i, t, p in zip(ids, tau, prop))))

    hook("pair-exp")
    pairs, paths = pair_exp(config, config.subplots, out / "pairs.csv", command="run")
    files += paths

    hook("calibrate")
    rows = calibration_rows(pairs, read_site_covariates(config.site_covariates), model)
    cal.write_rows(out / "calibration_rows.csv", rows)
    files.append(out / "calibration_rows.csv")
    fit, fit_path = calibrate(config, rows, out / "fit.json", inputs, command="run")
    files.append(fit_path)

    hook("validate")
    files.append(validate(config, rows, config.sites or None, out / "loocv.json", inputs,
                          config.variant_list(), config.mode_list(), command="run"))

    hook("bootstrap")
    site = np.array([r.site for r in rows])
    xy = {"x": np.array([r.sat_effect for r in rows]), "y": np.array([r.exp_effect for r in rows])}
    for stat in ("pearson_correlation", "ols_slope"):
        files.append(bootstrap(config, stat, site, xy, out / f"bootstrap_{stat}.json", inputs,
                               config.bootstrap_B, command="run"))

    hook("summarize")
    mode = config.calibration_mode
    calibrated = apply_fit(mode, fit.to_dict(), tau)
    columns = {n: X[:, j] for j, n in enumerate(COVARIATE_NAMES)}
    if config.trim_threshold > 0:
        keep = trim_by_propensity(prop, config.trim_threshold).keep
        calibrated = calibrated[keep]
        columns = {k: v[keep] for k, v in columns.items()}
    sdir = out / "summaries"
    sdir.mkdir(exist_ok=True)
    for name in ("gdd", "edd", "early_precip", "growing_precip"):
        files += summary_outputs(config, "quintile", calibrated, columns,
                                 sdir / f"quintile_{name}.json", inputs, covariate=name,
                                 command="run")
    files += summary_outputs(config, "heatmap", calibrated, columns, sdir / "heatmap.csv",
                             inputs, command="run")
    files += summary_outputs(config, "spatial", calibrated, columns, sdir / "spatial.csv",
                             inputs, command="run")
    files += summary_outputs(config, "positivity", calibrated, columns,
                             sdir / "positivity.json", inputs, command="run")
    files += summary_outputs(config, "trend", calibrated, columns, sdir / "trend.json", inputs,
                             command="run")

    hook("manifest")
    return write_manifest(out, files, provenance("run", config, inputs))
