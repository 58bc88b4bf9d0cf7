"""Paired experimental rotation effects and their site-year summaries."""
from __future__ import annotations

import csv
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from .ingestion import ExperimentalSubplot, crop_arms


@dataclass(frozen=True)
class PairedDifference:
    site: str
    year: int
    pair_index: int                 # 1-based within the site-year
    treated_yield: float
    control_yield: float
    effect: float
    management_key: tuple = ()      # (tillage, fertilizer, drainage, replicate)
    treated_id: int = -1
    control_id: int = -1

    @property
    def tillage(self) -> str:
        return self.management_key[0] if self.management_key else ""


@dataclass
class PairingReport:
    unmatched: list[dict] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)


def pair_subplots(subplots: Sequence[ExperimentalSubplot], crop: str):
    """Match treated subplots to control subplots sharing site, year,
    replicate, tillage, fertilizer and drainage.

    When a key group holds several candidates of one arm, both arms are
    ordered by (yield, subplot id) and matched rank by rank, so the resulting
    set of (effect, key) pairs does not depend on input row order.

    Returns:
        (list of PairedDifference, PairingReport)
    """
    treated, control = crop_arms(crop)
    groups: dict[tuple, dict[str, list]] = defaultdict(lambda: {"t": [], "c": []})
    for sp in subplots:
        if sp.rotation is treated:
            arm = "t"
        elif sp.rotation is control:
            arm = "c"
        else:
            continue
        key = (sp.site, sp.year, sp.replicate, sp.tillage, sp.fertilizer, sp.drainage)
        groups[key][arm].append(sp)

    report = PairingReport()
    raw = []
    for key in sorted(groups):
        t_list = sorted(groups[key]["t"], key=lambda s: (s.yield_tha, s.subplot_id))
        c_list = sorted(groups[key]["c"], key=lambda s: (s.yield_tha, s.subplot_id))
        if len(t_list) > 1 or len(c_list) > 1:
            report.notes.append(f"key {key}: {len(t_list)} treated and {len(c_list)} control "
                                f"candidates paired in ascending (yield, subplot id) order")
        m = min(len(t_list), len(c_list))
        for k in range(m):
            raw.append((key, t_list[k], c_list[k]))
        for sp in t_list[m:] + c_list[m:]:
            report.unmatched.append({"subplot_id": sp.subplot_id, "site": sp.site,
                                     "year": sp.year, "rotation": sp.rotation.value,
                                     "replicate": sp.replicate})

    pairs = []
    counter: dict[tuple, int] = defaultdict(int)
    for key, t, c in raw:
        site, year, rep, till, fert, drain = key
        counter[(site, year)] += 1
        pairs.append(PairedDifference(site, year, counter[(site, year)], t.yield_tha,
                                      c.yield_tha, t.yield_tha - c.yield_tha,
                                      (till, fert, drain, rep), t.subplot_id, c.subplot_id))
    report.unmatched.sort(key=lambda u: u["subplot_id"])
    return pairs, report


# ------------------------------------------------------------------ summaries

@dataclass(frozen=True)
class SiteYearEffect:
    site: str
    year: int
    mean_effect: float
    se: float            # nan when the site has no residual degrees of freedom
    n_pairs: int
    df: int
    ci_low: float
    ci_high: float

    @property
    def se_defined(self) -> bool:
        return not math.isnan(self.se)


@dataclass(frozen=True)
class SiteEffect:
    site: str
    mean_effect: float
    se: float
    n_pairs: int
    n_years: int
    ci_low: float
    ci_high: float


def critical_value(df: int, level: float = 0.95) -> float:
    """Two-sided t quantile; the normal quantile once df exceeds 30."""
    q = 0.5 + level / 2
    if df > 30:
        return float(stats.norm.ppf(q))
    return float(stats.t.ppf(q, df))


def _interval(mean: float, se: float, df: int):
    if not df > 0 or math.isnan(se):
        return math.nan, math.nan
    half = critical_value(df) * se
    return mean - half, mean + half


def _mean(e: np.ndarray) -> float:
    # shifted by the first value so a constant group has an exact mean
    return float(e[0] + np.mean(e - e[0]))


def site_year_means(pairs: Sequence[PairedDifference]):
    """Per site-year mean effects with SEs pooled across years within a site,
    and per-site means over all pairs with unpooled SEs.

    The pooled residual variance of site s is
    sum_t sum_j (e_stj - mean_st)^2 / sum_t (n_st - 1), and the SE of
    site-year (s, t) is its square root over sqrt(n_st).

    Returns:
        (list of SiteYearEffect, list of SiteEffect)
    """
    if not pairs:
        raise ValueError("no pairs to summarize")
    by_site: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for p in pairs:
        by_site[p.site][p.year].append(p.effect)

    site_years = []
    sites = []
    for site in sorted(by_site):
        years = by_site[site]
        ss = 0.0
        df = 0
        for effects in years.values():
            e = np.asarray(effects)
            ss += float(np.sum((e - _mean(e)) ** 2))
            df += len(e) - 1
        sp = math.sqrt(ss / df) if df > 0 else math.nan
        for year in sorted(years):
            e = np.asarray(years[year])
            mean = _mean(e)
            se = sp / math.sqrt(len(e))
            lo, hi = _interval(mean, se, df)
            site_years.append(SiteYearEffect(site, year, mean, se, len(e), df, lo, hi))

        allv = np.concatenate([np.asarray(v) for v in years.values()])
        n = len(allv)
        mean = _mean(allv)
        se = math.sqrt(float(np.sum((allv - mean) ** 2)) / (n - 1) / n) if n > 1 else math.nan
        lo, hi = _interval(mean, se, n - 1)
        sites.append(SiteEffect(site, mean, se, n, len(years), lo, hi))
    return site_years, sites


PAIR_COLUMNS = ("site", "year", "pair_index", "treated_yield", "control_yield", "effect")


def write_pairs(path: str | Path, pairs: Iterable[PairedDifference]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PAIR_COLUMNS + ("tillage", "fertilizer", "drainage", "replicate"))
        for p in pairs:
            writer.writerow([p.site, p.year, p.pair_index, repr(p.treated_yield),
                             repr(p.control_yield), repr(p.effect), *p.management_key])


def read_pairs(path: str | Path) -> list[PairedDifference]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            key = tuple(row.get(k, "") for k in ("tillage", "fertilizer", "drainage", "replicate"))
            out.append(PairedDifference(row["site"], int(row["year"]), int(row["pair_index"]),
                                        float(row["treated_yield"]), float(row["control_yield"]),
                                        float(row["effect"]), key))
    return out
