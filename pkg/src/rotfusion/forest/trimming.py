from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class TrimResult:
    keep: np.ndarray          # indices retained, ascending
    n_dropped_high: int
    n_dropped_low: int

    @property
    def n_dropped(self) -> int:
        return self.n_dropped_high + self.n_dropped_low


def trim_by_propensity(scores, threshold: float = 0.9) -> TrimResult:
    """Drop rows whose propensity is >= threshold or <= 1 - threshold."""
    if not 0.5 < threshold <= 1.0:
        raise ValueError(f"threshold must lie in (0.5, 1], got {threshold}")
    scores = np.asarray(scores, dtype=np.float64)
    if np.any((scores < 0) | (scores > 1)) or not np.all(np.isfinite(scores)):
        raise ValueError("propensity scores must lie in [0, 1]")
    high = scores >= threshold
    low = scores <= 1.0 - threshold
    keep = np.flatnonzero(~(high | low))
    return TrimResult(keep, int(high.sum()), int((low & ~high).sum()))
