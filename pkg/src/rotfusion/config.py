"""Plain-text ``key = value`` run configuration.

Blank lines and ``#`` comments are ignored. Keys are the fields of
PipelineConfig plus any SimulationConfig field; unknown keys, malformed lines
and bad values are reported with their line number.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path

from .forest.config import ForestConfig
from .simulator import SimulationConfig
from .validation.loocv import TABLE_VARIANTS, EffectsMode


class ConfigError(ValueError):
    pass


_SIM_ONLY = [f.name for f in fields(SimulationConfig) if f.name not in ("seed", "crop")]


@dataclass
class PipelineConfig:
    crop: str = "corn"
    seed: int = 0
    threads: int = 1
    log_level: str = "WARNING"
    # forest
    n_trees: int = 500
    min_leaf: int = 5
    mtry: int = 4
    subsample_fraction: float = 0.5
    honesty_fraction: float = 0.5
    # inputs / outputs
    pixels: str = ""
    subplots: str = ""
    sites: str = ""
    site_covariates: str = ""
    out_dir: str = ""
    # experiments
    study_start: int = 2000
    literal_corn_criterion: bool = False
    # calibration and validation
    calibration_mode: str = "mixed"
    variants: str = ",".join(TABLE_VARIANTS)
    effects_modes: str = ",".join(m.value for m in EffectsMode)
    year_blups: bool = False
    bootstrap_B: int = 1000
    # summaries
    quintile_q: float = 0.2
    heatmap_bins: int = 40
    heatmap_x: str = "gdd"
    heatmap_y: str = "growing_precip"
    cell_km: float = 10.0
    cell_area: bool = False
    trim_threshold: float = 0.0      # 0 disables propensity trimming of summaries
    # simulation
    benchmark: str = ""              # "paper_like" selects the eleven-site benchmark
    scale: float = 0.1
    simulation: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.crop not in ("corn", "soy"):
            raise ConfigError(f"crop must be corn or soy, got {self.crop!r}")
        if self.calibration_mode not in ("mixed", "additive"):
            raise ConfigError(f"calibration_mode must be mixed or additive, got "
                              f"{self.calibration_mode!r}")
        if self.benchmark not in ("", "paper_like"):
            raise ConfigError(f"unknown benchmark {self.benchmark!r}")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")
        try:
            self.forest_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def forest_config(self) -> ForestConfig:
        return ForestConfig(self.n_trees, self.min_leaf, self.mtry, self.subsample_fraction,
                            self.honesty_fraction, self.seed)

    def simulation_config(self) -> SimulationConfig:
        from .simulator import paper_like_config
        try:
            if self.benchmark == "paper_like":
                overrides = {k: v for k, v in self.simulation.items()}
                overrides["crop"] = self.crop
                return paper_like_config(self.seed, self.scale, **_typed_sim(overrides))
            data = dict(self.simulation)
            data["seed"] = self.seed
            data["crop"] = self.crop
            return SimulationConfig.from_dict(data)
        except ValueError as exc:
            raise ConfigError(f"simulation settings: {exc}") from None

    def variant_list(self) -> list[str]:
        return [v.strip() for v in self.variants.split(",") if v.strip()]

    def mode_list(self) -> list[str]:
        modes = [m.strip() for m in self.effects_modes.split(",") if m.strip()]
        for m in modes:
            try:
                EffectsMode(m)
            except ValueError:
                raise ConfigError(f"unknown effects mode {m!r}") from None
        return modes

    def to_dict(self) -> dict:
        """Flat echo of every resolved setting, suitable for ``format_config``."""
        out = {}
        for f in fields(self):
            if f.name == "simulation":
                continue
            out[f.name] = getattr(self, f.name)
        for k in sorted(self.simulation):
            out[k] = self.simulation[k]
        return out


def _typed_sim(raw: dict) -> dict:
    default = SimulationConfig()
    from .simulator import _coerce
    return {k: _coerce(k, v, getattr(default, k)) for k, v in raw.items()}


def _convert(name: str, text: str, default):
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def parse_config_text(text: str, source: str = "<config>") -> dict[str, tuple[str, int]]:
    """Raw ``key -> (value, line)`` pairs from config text."""
    out: dict[str, tuple[str, int]] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} "
                              f"(first set on line {out[key][1]})")
        out[key] = (value, lineno)
    return out


def build_config(raw: dict[str, tuple[str, int]], overrides: dict[str, str] | None = None,
                 source: str = "<config>") -> PipelineConfig:
    """PipelineConfig from parsed config entries; ``overrides`` (from command
    line flags) win over file values."""
    merged = dict(raw)
    for k, v in (overrides or {}).items():
        merged[k] = (str(v), 0)
    defaults = PipelineConfig()
    kwargs = {}
    sim = {}
    own = {f.name for f in fields(PipelineConfig)} - {"simulation"}
    for key, (value, line) in merged.items():
        where = f"{source}:{line}" if line else "command line"
        if key in own:
            try:
                kwargs[key] = _convert(key, value, getattr(defaults, key))
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
        elif key in _SIM_ONLY:
            try:
                from .simulator import _coerce
                _coerce(key, value, getattr(SimulationConfig(), key))
            except ValueError as exc:
                raise ConfigError(f"{where}: bad value for {key}: {exc}") from None
            sim[key] = value
        else:
            raise ConfigError(f"{where}: unknown key {key!r}")
    kwargs["simulation"] = sim
    try:
        return PipelineConfig(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def load_config(path: str | Path | None, overrides: dict[str, str] | None = None) -> PipelineConfig:
    if path is None:
        return build_config({}, overrides)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        text = p.read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from None
    return build_config(parse_config_text(text, str(p)), overrides, str(p))


def format_config(values: dict) -> str:
    """Inverse of parsing: one ``key = value`` line per setting."""
    lines = []
    for key, value in values.items():
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, (list, tuple)):
            text = ",".join(str(v) for v in value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def replace(config: PipelineConfig, **changes) -> PipelineConfig:
    return dataclasses.replace(config, **changes)
