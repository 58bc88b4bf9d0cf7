"""Command line entry point.

Exit codes: 0 success, 2 configuration error (bad flags, unreadable or
malformed config, missing input files), 3 data validation error, 4 numerical
failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__, pipeline
from .calibration import calibrate as cal
from .calibration.reml import RemlError
from .config import ConfigError, PipelineConfig, load_config
from .degree_days import load_weather, season_features
from .forest import NoOverlapError
from .ingestion import SchemaError
from .simulator import simulate
from .validation.bootstrap import STATISTICS
from .validation.loocv import TABLE_VARIANTS, EffectsMode

log = logging.getLogger("rotfusion")

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

SUMMARY_KINDS = ("quintile", "heatmap", "spatial", "positivity", "trend")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("common options")
    g.add_argument("--config", help="key = value config file")
    g.add_argument("--seed", type=int, help="global seed (overrides config)")
    g.add_argument("--threads", type=int, help="worker threads; never changes results")
    g.add_argument("--out", help="output file (output directory for simulate and run)")
    g.add_argument("--log-level", choices=("DEBUG", "INFO", "WARNING", "ERROR"))
    g.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key; repeatable")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rotfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"rotfusion {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("degree-days", help="season degree days and precipitation from daily weather")
    _common(p)
    p.add_argument("--in", dest="inp", required=True, help="daily weather CSV")
    p.add_argument("--year", type=int, help="season year (required when the file spans several)")

    p = sub.add_parser("simulate", help="draw a synthetic dataset with known effects")
    _common(p)
    p.add_argument("--out-dir", help="output directory (same as --out)")
    p.add_argument("--benchmark", choices=("paper_like",), help="use the eleven-site benchmark")
    p.add_argument("--scale", type=float, help="benchmark pixel scale")

    p = sub.add_parser("fit-sat", help="fit the causal forest on observational pixels")
    _common(p)
    p.add_argument("--crop", choices=("corn", "soy"))
    p.add_argument("--in", dest="inp", help="pixels CSV (default: config 'pixels')")

    p = sub.add_parser("predict", help="effect and propensity predictions from a model")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--in", dest="inp", required=True, help="CSV with the covariate columns")
    p.add_argument("--flag-extrapolation", action="store_true",
                   help="add an 'extrapolated' column")

    p = sub.add_parser("pair-exp", help="filter and pair experimental subplots")
    _common(p)
    p.add_argument("--crop", choices=("corn", "soy"))
    p.add_argument("--in", dest="inp", help="subplots CSV (default: config 'subplots')")

    p = sub.add_parser("calibrate", help="fit the calibration model")
    _common(p)
    p.add_argument("--mode", choices=("mixed", "additive"))
    p.add_argument("--in", dest="inp", help="calibration rows CSV")
    p.add_argument("--pairs", help="pairs CSV, to build rows with --model and --site-covariates")
    p.add_argument("--model")
    p.add_argument("--site-covariates")
    p.add_argument("--rows-out", help="also write the built calibration rows here")
    p.add_argument("--B", type=int, help="bootstrap replicates for additive mode")

    p = sub.add_parser("validate", help="leave-one-site-out comparison of predictors")
    _common(p)
    p.add_argument("--variant", default="all", help=f"one of {', '.join(TABLE_VARIANTS)} or all")
    p.add_argument("--effects-mode", default="all",
                   help=f"one of {', '.join(m.value for m in EffectsMode)} or all")
    p.add_argument("--in", dest="inp", required=True, help="calibration rows CSV")
    p.add_argument("--sites", help="sites CSV (site,lat,lon); needed for nearest_experiment")
    p.add_argument("--year-blups", action="store_true")

    p = sub.add_parser("bootstrap", help="cluster-bootstrap percentile interval")
    _common(p)
    p.add_argument("--stat", required=True, choices=sorted(STATISTICS))
    p.add_argument("--B", type=int)
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--cluster-col", default="site")
    p.add_argument("--x-col", default="sat_effect")
    p.add_argument("--y-col", default="exp_effect")
    p.add_argument("--effect-col", default="exp_effect")

    p = sub.add_parser("summarize", help="quintile, heatmap, spatial, positivity or trend summary")
    _common(p)
    p.add_argument("--kind", required=True, choices=SUMMARY_KINDS)
    p.add_argument("--in", dest="inp", required=True, help="CSV with the effect column")
    p.add_argument("--covariates", help="row-aligned CSV supplying covariate columns")
    p.add_argument("--effect-col", default="tau_hat")
    p.add_argument("--covariate", default="gdd", help="quintile covariate")
    p.add_argument("--fit", help="calibration fit JSON applied to the effect column")
    p.add_argument("--cluster-col", help="cluster column for a positivity interval")
    p.add_argument("--trim", type=float, help="drop rows with propensity outside "
                   "(1 - t, t); needs a propensity column")

    p = sub.add_parser("run", help="the whole pipeline from config")
    _common(p)
    p.add_argument("--crop", choices=("corn", "soy"))
    return parser


def _overrides(args) -> dict[str, str]:
    out: dict[str, str] = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    direct = {"seed": "seed", "threads": "threads", "log_level": "log_level", "crop": "crop",
              "mode": "calibration_mode", "B": "bootstrap_B", "benchmark": "benchmark",
              "scale": "scale", "trim": "trim_threshold"}
    for attr, key in direct.items():
        v = getattr(args, attr, None)
        if v is not None:
            out[key] = str(v)
    if getattr(args, "year_blups", False):
        out["year_blups"] = "true"
    if args.command == "fit-sat" and args.inp:
        out["pixels"] = args.inp
    if args.command == "pair-exp" and args.inp:
        out["subplots"] = args.inp
    return out


def _require_file(path, what: str) -> Path:
    if not path:
        raise ConfigError(f"no {what} given")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} not found: {p}")
    return p


def _require_out(args, what: str = "--out") -> Path:
    out = getattr(args, "out_dir", None) or args.out
    if not out:
        raise ConfigError(f"{what} is required")
    return Path(out)


# ---------------------------------------------------------------- commands

def cmd_degree_days(args, config: PipelineConfig) -> None:
    days = load_weather(_require_file(args.inp, "weather file"))
    years = sorted({d.date.year for d in days})
    year = args.year
    if year is None:
        if len(years) != 1:
            raise ConfigError(f"weather spans years {years[0]}-{years[-1]}; pass --year")
        year = years[0]
    feats = season_features(days, year)
    header = ("gdd", "edd", "early_precip", "growing_precip")
    line = ",".join(header) + "\n" + ",".join(repr(float(feats[k])) for k in header) + "\n"
    if args.out:
        Path(args.out).write_text(line, encoding="utf-8")
    else:
        sys.stdout.write(line)


def cmd_simulate(args, config: PipelineConfig) -> None:
    out = _require_out(args, "--out-dir")
    sim_config = config.simulation_config()
    output = simulate(sim_config)
    paths = output.write(out)
    pipeline.write_json(paths["truth"], "truth", output.truth.to_dict(),
                        pipeline.provenance("simulate", config))


def cmd_fit_sat(args, config: PipelineConfig) -> None:
    pixels = _require_file(config.pixels, "pixels file")
    pipeline.fit_sat(config, pixels, _require_out(args))


def cmd_predict(args, config: PipelineConfig) -> None:
    model = _require_file(args.model, "model file")
    inp = _require_file(args.inp, "covariates file")
    pipeline.predict(config, model, inp, _require_out(args),
                     flag_extrapolation=args.flag_extrapolation)


def cmd_pair_exp(args, config: PipelineConfig) -> None:
    subplots = _require_file(config.subplots, "subplots file")
    pipeline.pair_exp(config, subplots, _require_out(args))


def cmd_calibrate(args, config: PipelineConfig) -> None:
    out = _require_out(args)
    if args.inp:
        rows_path = _require_file(args.inp, "rows file")
        rows = cal.read_rows(rows_path)
        inputs = {"rows": pipeline.input_digest(rows_path)}
    else:
        if not (args.pairs and args.model and args.site_covariates):
            raise ConfigError("calibrate needs --in ROWS, or --pairs, --model and --site-covariates")
        from .experimental import read_pairs
        from .forest.io import load_model
        from .simulator import read_site_covariates
        paths = {"pairs": _require_file(args.pairs, "pairs file"),
                 "model": _require_file(args.model, "model file"),
                 "site_covariates": _require_file(args.site_covariates, "site covariates file")}
        model, _ = load_model(paths["model"])
        rows = pipeline.calibration_rows(read_pairs(paths["pairs"]),
                                         read_site_covariates(paths["site_covariates"]), model)
        inputs = {k: pipeline.input_digest(v) for k, v in paths.items()}
        if args.rows_out:
            cal.write_rows(args.rows_out, rows)
    pipeline.calibrate(config, rows, out, inputs)


def _choices(value: str, allowed, what: str) -> list[str]:
    if value == "all":
        return list(allowed)
    names = [v.strip() for v in value.split(",") if v.strip()]
    for n in names:
        if n not in allowed:
            raise ConfigError(f"unknown {what} {n!r}; choose from {', '.join(allowed)} or all")
    return names


def cmd_validate(args, config: PipelineConfig) -> None:
    rows_path = _require_file(args.inp, "rows file")
    variants = _choices(args.variant, TABLE_VARIANTS, "variant")
    modes = _choices(args.effects_mode, [m.value for m in EffectsMode], "effects mode")
    sites = None
    inputs = {"rows": pipeline.input_digest(rows_path)}
    if args.sites:
        sites = _require_file(args.sites, "sites file")
        inputs["sites"] = pipeline.input_digest(sites)
    elif "nearest_experiment" in variants:
        raise ConfigError("nearest_experiment needs --sites")
    pipeline.validate(config, cal.read_rows(rows_path), sites, _require_out(args), inputs,
                      variants, modes)


def cmd_bootstrap(args, config: PipelineConfig) -> None:
    path = _require_file(args.inp, "input file")
    cols = pipeline.read_columns(path)
    if args.cluster_col not in cols:
        raise SchemaError(f"{path}: missing cluster column {args.cluster_col!r}")
    if args.stat in ("pearson_correlation", "ols_slope"):
        data = {"x": pipeline.numeric_column(cols, args.x_col, path),
                "y": pipeline.numeric_column(cols, args.y_col, path)}
    else:
        data = {"effect": pipeline.numeric_column(cols, args.effect_col, path)}
    pipeline.bootstrap(config, args.stat, np.array(cols[args.cluster_col]), data,
                       _require_out(args), {"data": pipeline.input_digest(path)},
                       config.bootstrap_B)


def cmd_summarize(args, config: PipelineConfig) -> None:
    path = _require_file(args.inp, "input file")
    cols = pipeline.read_columns(path)
    inputs = {"effects": pipeline.input_digest(path)}
    n = len(next(iter(cols.values()), []))
    if args.covariates:
        cpath = _require_file(args.covariates, "covariates file")
        extra = pipeline.read_columns(cpath)
        m = len(next(iter(extra.values()), []))
        if m != n:
            raise pipeline.DataError(f"{cpath} has {m} rows but {path} has {n}")
        for k, v in extra.items():
            cols.setdefault(k, v)
        inputs["covariates"] = pipeline.input_digest(cpath)
    effects = pipeline.numeric_column(cols, args.effect_col, path)
    if args.fit:
        fpath = _require_file(args.fit, "fit file")
        mode, fit = pipeline.load_fit(fpath)
        effects = pipeline.apply_fit(mode, fit, effects)
        inputs["fit"] = pipeline.input_digest(fpath)
    keep = np.arange(n)
    if config.trim_threshold > 0:
        from .forest import trim_by_propensity
        prop = pipeline.numeric_column(cols, "propensity", path)
        keep = trim_by_propensity(prop, config.trim_threshold).keep

    wanted = {"quintile": [args.covariate], "heatmap": [config.heatmap_x, config.heatmap_y],
              "spatial": ["lat", "lon"], "positivity": [], "trend": ["year"]}[args.kind]
    columns = {c: pipeline.numeric_column(cols, c, path)[keep] for c in wanted}
    cluster = None
    if args.cluster_col:
        if args.cluster_col not in cols:
            raise SchemaError(f"missing cluster column {args.cluster_col!r}")
        cluster = np.array(cols[args.cluster_col])[keep]
    pipeline.summary_outputs(config, args.kind, effects[keep], columns, _require_out(args),
                             inputs, covariate=args.covariate, cluster=cluster)


def cmd_run(args, config: PipelineConfig, stage: list) -> None:
    out = Path(args.out or config.out_dir or "")
    if not (args.out or config.out_dir):
        raise ConfigError("run needs --out or an out_dir config key")
    for what, path in pipeline.required_inputs(config).items():
        _require_file(path, f"{what} file")
    manifest = pipeline.run(config, out, stage_hook=lambda name: stage.__setitem__(0, name))
    print(manifest)


COMMANDS = {
    "degree-days": cmd_degree_days, "simulate": cmd_simulate, "fit-sat": cmd_fit_sat,
    "predict": cmd_predict, "pair-exp": cmd_pair_exp, "calibrate": cmd_calibrate,
    "validate": cmd_validate, "bootstrap": cmd_bootstrap, "summarize": cmd_summarize,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    stage = [args.command]
    try:
        config = load_config(args.config, _overrides(args))
        logging.basicConfig(level=getattr(logging, config.log_level.upper(), logging.WARNING),
                            format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
        if args.command == "run":
            cmd_run(args, config, stage)
        else:
            COMMANDS[args.command](args, config)
    except ConfigError as exc:
        print(f"rotfusion {stage[0]}: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (RemlError, NoOverlapError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"rotfusion {stage[0]}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (SchemaError, pipeline.DataError, cal.CalibrationError, ValueError, KeyError,
            OSError) as exc:
        print(f"rotfusion {stage[0]}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return 0


if __name__ == "__main__":
    sys.exit(main())
