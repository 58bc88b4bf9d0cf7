"""Typed loading, validation and filtering of the observational and
experimental input tables."""
from __future__ import annotations

import csv
import enum
import json
import logging
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .degree_days import WeatherDay, load_weather  # noqa: F401  (third input table)

log = logging.getLogger(__name__)


class SchemaError(ValueError):
    """The header of an input file does not match the expected columns."""


class RotationCategory(str, enum.Enum):
    CC = "CC"
    SC = "SC"
    SS = "SS"
    CS = "CS"
    OTHER = "OTHER"

    @classmethod
    def parse(cls, text: str) -> "RotationCategory":
        key = text.strip().upper()
        try:
            return cls(key)
        except ValueError:
            raise ValueError(f"unknown rotation {text!r}") from None


# treated and control rotation for each crop's contrast
CROP_ARMS = {
    "corn": (RotationCategory.SC, RotationCategory.CC),
    "soy": (RotationCategory.CS, RotationCategory.SS),
}


def crop_arms(crop: str, literal_corn_criterion: bool = False):
    if crop not in CROP_ARMS:
        raise ValueError(f"crop must be 'corn' or 'soy', got {crop!r}")
    if crop == "corn" and literal_corn_criterion:
        return RotationCategory.CS, RotationCategory.CC
    return CROP_ARMS[crop]


COVARIATE_NAMES = (
    "lat", "lon", "year", "gdd", "edd", "early_precip", "growing_precip",
    "prev_early_precip", "prev_growing_precip", "rootznaws", "aws0_100",
    "nccpi_corn", "nccpi_soy",
)
PRECIP_NAMES = ("early_precip", "growing_precip", "prev_early_precip", "prev_growing_precip")

OBSERVATIONAL_COLUMNS = ("pixel_id", "year", "rotation", "yield_tha", "lat", "lon", "gdd", "edd",
                         "early_precip", "growing_precip", "prev_early_precip",
                         "prev_growing_precip", "rootznaws", "aws0_100", "nccpi_corn",
                         "nccpi_soy")
EXPERIMENTAL_COLUMNS = ("site", "year", "replicate", "rotation", "tillage", "fertilizer",
                        "drainage", "yield_tha", "rotation_start_year", "in_region")


@dataclass(frozen=True)
class CovariateVector:
    lat: float
    lon: float
    year: float
    gdd: float
    edd: float
    early_precip: float
    growing_precip: float
    prev_early_precip: float
    prev_growing_precip: float
    rootznaws: float
    aws0_100: float
    nccpi_corn: float
    nccpi_soy: float

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in COVARIATE_NAMES], dtype=np.float64)


@dataclass(frozen=True)
class ObservationalPixel:
    pixel_id: str
    year: int
    rotation: RotationCategory
    yield_tha: float
    covariates: CovariateVector

    @property
    def eligible(self) -> bool:
        return self.rotation is not RotationCategory.OTHER


@dataclass(frozen=True)
class ExperimentalSubplot:
    subplot_id: int           # 0-based data-row position in the source file
    site: str
    year: int
    replicate: str
    rotation: RotationCategory
    tillage: str
    fertilizer: str
    drainage: str
    yield_tha: float
    rotation_start_year: int
    in_region: bool

    @property
    def zero_fertilizer(self) -> bool:
        return is_zero_fertilizer(self.fertilizer)

    @property
    def full_key(self) -> tuple:
        return (self.site, self.year, self.replicate, self.rotation.value, self.tillage,
                self.fertilizer, self.drainage)


def is_zero_fertilizer(level: str) -> bool:
    text = level.strip().lower()
    if text in ("none", "zero", "no", "unfertilized"):
        return True
    try:
        return float(text) == 0.0
    except ValueError:
        return False


@dataclass
class ValidationReport:
    table: str
    n_rows: int = 0
    n_loaded: int = 0
    rotation_counts: dict[str, int] = field(default_factory=dict)
    n_ineligible: int = 0
    row_errors: list[dict] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class _RowError(ValueError):
    pass


def _float(row: dict, name: str) -> float:
    text = (row.get(name) or "").strip()
    if text == "":
        raise _RowError(f"missing value for {name}")
    try:
        value = float(text)
    except ValueError:
        raise _RowError(f"non-numeric {name}: {text!r}") from None
    if not np.isfinite(value):
        raise _RowError(f"non-finite {name}: {text!r}")
    return value


def _int(row: dict, name: str) -> int:
    value = _float(row, name)
    if value != int(value):
        raise _RowError(f"non-integer {name}: {row[name]!r}")
    return int(value)


def _text(row: dict, name: str) -> str:
    text = (row.get(name) or "").strip()
    if text == "":
        raise _RowError(f"missing value for {name}")
    return text


def _bool(row: dict, name: str) -> bool:
    text = _text(row, name).lower()
    if text in ("true", "t", "1", "yes", "y"):
        return True
    if text in ("false", "f", "0", "no", "n"):
        return False
    raise _RowError(f"not a boolean {name}: {row[name]!r}")


def _read(path: str | Path, columns: Sequence[str]):
    fh = open(path, newline="", encoding="utf-8")
    reader = csv.DictReader(fh)
    header = reader.fieldnames or []
    for name in columns:
        if name not in header:
            fh.close()
            raise SchemaError(f"{path}: missing column {name!r}")
    return fh, reader


def _parse_pixel(row: dict, span) -> ObservationalPixel:
    year = _int(row, "year")
    if span is not None and not span[0] <= year <= span[1]:
        raise _RowError(f"year {year} outside study span {span[0]}-{span[1]}")
    rotation = RotationCategory.parse(_text(row, "rotation"))
    yld = _float(row, "yield_tha")
    if yld < 0:
        raise _RowError(f"negative yield {yld}")
    values = {}
    for name in COVARIATE_NAMES:
        values[name] = float(year) if name == "year" else _float(row, name)
    for name in PRECIP_NAMES:
        if values[name] < 0:
            raise _RowError(f"negative precipitation {name} = {values[name]}")
    for name in ("gdd", "edd"):
        if values[name] < 0:
            raise _RowError(f"negative {name} = {values[name]}")
    return ObservationalPixel(_text(row, "pixel_id"), year, rotation, yld,
                              CovariateVector(**values))


def load_observational(path: str | Path, schema: Sequence[str] = OBSERVATIONAL_COLUMNS,
                       study_span: tuple[int, int] | None = None):
    """Load observational pixel-years.

    Malformed rows are reported (with their file line number) and skipped;
    rows with rotation OTHER are loaded but not eligible for estimation.

    Returns:
        (list of ObservationalPixel, ValidationReport)
    """
    report = ValidationReport("observational")
    counts: Counter = Counter()
    pixels = []
    fh, reader = _read(path, schema)
    with fh:
        for line, row in enumerate(reader, start=2):
            report.n_rows += 1
            try:
                pixel = _parse_pixel(row, study_span)
            except (_RowError, ValueError) as exc:
                report.row_errors.append({"line": line, "error": str(exc)})
                continue
            pixels.append(pixel)
            counts[pixel.rotation.value] += 1
            if not pixel.eligible:
                report.n_ineligible += 1
    report.n_loaded = len(pixels)
    report.rotation_counts = {r.value: counts.get(r.value, 0) for r in RotationCategory
                              if counts.get(r.value, 0)}
    return pixels, report


def _parse_subplot(row: dict, subplot_id: int) -> ExperimentalSubplot:
    year = _int(row, "year")
    start = _int(row, "rotation_start_year")
    if start > year:
        raise _RowError(f"rotation_start_year {start} is after year {year}")
    yld = _float(row, "yield_tha")
    if yld < 0:
        raise _RowError(f"negative yield {yld}")
    return ExperimentalSubplot(
        subplot_id=subplot_id,
        site=_text(row, "site"),
        year=year,
        replicate=_text(row, "replicate"),
        rotation=RotationCategory.parse(_text(row, "rotation")),
        tillage=_text(row, "tillage"),
        fertilizer=_text(row, "fertilizer"),
        drainage=_text(row, "drainage"),
        yield_tha=yld,
        rotation_start_year=start,
        in_region=_bool(row, "in_region"),
    )


def load_experimental(path: str | Path):
    """Load experimental subplots unfiltered.

    Returns:
        (list of ExperimentalSubplot, ValidationReport)
    """
    report = ValidationReport("experimental")
    counts: Counter = Counter()
    subplots = []
    seen: dict[tuple, int] = {}
    fh, reader = _read(path, EXPERIMENTAL_COLUMNS)
    with fh:
        for idx, row in enumerate(reader):
            line = idx + 2
            report.n_rows += 1
            try:
                sp = _parse_subplot(row, idx)
            except (_RowError, ValueError) as exc:
                report.row_errors.append({"line": line, "error": str(exc)})
                continue
            key = sp.full_key
            if key in seen:
                report.warnings.append(f"duplicate subplot key {key} on lines {seen[key]} and {line}")
            else:
                seen[key] = line
            subplots.append(sp)
            counts[sp.rotation.value] += 1
            if sp.rotation is RotationCategory.OTHER:
                report.n_ineligible += 1
    report.n_loaded = len(subplots)
    report.rotation_counts = {r.value: counts.get(r.value, 0) for r in RotationCategory
                              if counts.get(r.value, 0)}
    for w in report.warnings:
        log.warning(w)
    return subplots, report


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, RotationCategory):
        return value.value
    return str(value)


def write_observational(path: str | Path, pixels: Iterable[ObservationalPixel]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBSERVATIONAL_COLUMNS)
        for px in pixels:
            cov = px.covariates
            row = [px.pixel_id, px.year, px.rotation, px.yield_tha]
            row += [getattr(cov, n) for n in OBSERVATIONAL_COLUMNS[4:]]
            writer.writerow([_fmt(v) for v in row])


def write_experimental(path: str | Path, subplots: Iterable[ExperimentalSubplot]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(EXPERIMENTAL_COLUMNS)
        for sp in subplots:
            writer.writerow([_fmt(getattr(sp, n)) for n in EXPERIMENTAL_COLUMNS])


def pixel_arrays(pixels: Sequence[ObservationalPixel], crop: str):
    """Covariates, treatment and yield for the estimation-eligible pixels of a crop.

    Returns:
        (X (n, 13), w (n,) int, y (n,), kept indices into ``pixels``)
    """
    treated, control = crop_arms(crop)
    keep = [i for i, px in enumerate(pixels) if px.rotation in (treated, control)]
    X = np.array([pixels[i].covariates.as_array() for i in keep]).reshape(len(keep), 13)
    w = np.array([pixels[i].rotation is treated for i in keep], dtype=np.int64)
    y = np.array([pixels[i].yield_tha for i in keep], dtype=np.float64)
    return X, w, y, np.asarray(keep, dtype=np.int64)


# ---------------------------------------------------------------- filtering

RULE_OTHER = "other_rotation"
RULE_REGION = "outside_region"
RULE_STUDY_START = "before_study_start"
RULE_FIRST_YEAR = "first_rotation_year"
RULE_NEVER_FERTILIZED = "site_never_fertilized"
RULE_ZERO_FERTILIZER = "zero_fertilizer"
RULE_MISSING_ARM = "site_missing_arm"


@dataclass(frozen=True)
class Exclusion:
    subplot_id: int
    site: str
    year: int
    rule: str


@dataclass
class FilterResult:
    kept: list[ExperimentalSubplot]
    exclusions: list[Exclusion]

    def rule_counts(self) -> dict[str, int]:
        return dict(sorted(Counter(e.rule for e in self.exclusions).items()))


def apply_experiment_filters(subplots: Sequence[ExperimentalSubplot], crop: str, *,
                             study_start: int | None = None,
                             literal_corn_criterion: bool = False) -> FilterResult:
    """Apply the experiment inclusion rules in a fixed order.

    Each dropped subplot is logged once under the first rule that removes it:
    OTHER rotation, outside region, before the study start, in or before the
    year the rotation began, zero fertilizer (or a site never fertilized), and
    finally sites that lack either the treated or the control rotation.
    """
    treated, control = crop_arms(crop, literal_corn_criterion)
    exclusions: list[Exclusion] = []
    remaining = []
    for sp in subplots:
        rule = None
        if sp.rotation is RotationCategory.OTHER:
            rule = RULE_OTHER
        elif not sp.in_region:
            rule = RULE_REGION
        elif study_start is not None and sp.year < study_start:
            rule = RULE_STUDY_START
        elif sp.year <= sp.rotation_start_year:
            rule = RULE_FIRST_YEAR
        if rule:
            exclusions.append(Exclusion(sp.subplot_id, sp.site, sp.year, rule))
        else:
            remaining.append(sp)

    fertilized_sites = {sp.site for sp in remaining if not sp.zero_fertilizer}
    after_fert = []
    for sp in remaining:
        if sp.site not in fertilized_sites:
            exclusions.append(Exclusion(sp.subplot_id, sp.site, sp.year, RULE_NEVER_FERTILIZED))
        elif sp.zero_fertilizer:
            exclusions.append(Exclusion(sp.subplot_id, sp.site, sp.year, RULE_ZERO_FERTILIZER))
        else:
            after_fert.append(sp)

    arms: dict[str, set] = defaultdict(set)
    for sp in after_fert:
        arms[sp.site].add(sp.rotation)
    kept = []
    for sp in after_fert:
        if treated in arms[sp.site] and control in arms[sp.site]:
            kept.append(sp)
        else:
            exclusions.append(Exclusion(sp.subplot_id, sp.site, sp.year, RULE_MISSING_ARM))
    if not kept:
        log.warning("experiment filters removed every subplot")
    exclusions.sort(key=lambda e: e.subplot_id)
    return FilterResult(kept, exclusions)


def record_fields(record) -> dict:
    """Plain-value view of a record, used for reports and comparisons."""
    out = {}
    for f in fields(record):
        v = getattr(record, f.name)
        out[f.name] = v.value if isinstance(v, RotationCategory) else v
    return out
