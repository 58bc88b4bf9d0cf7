from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import _rng
from ._ensemble import TreeEnsemble, grow_ensemble
from .config import ForestConfig


@dataclass
class RegressionForest:
    """Honest subsampled regression forest with out-of-bag predictions."""

    config: ForestConfig
    ensemble: TreeEnsemble
    leaf_value: np.ndarray
    oob_prediction: np.ndarray
    n_features: int

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} covariates, got {X.shape[1]}")
        total, _, used = self.ensemble.sums(X, self.leaf_value, self.leaf_value)
        with np.errstate(invalid="ignore", divide="ignore"):
            return total / used


def fit_regression_forest(X, target, config: ForestConfig | None = None, *,
                          stream: int = _rng.STREAM_REGRESSION_FOREST,
                          threads: int = 1) -> RegressionForest:
    """Fit an honest regression forest of ``target`` on ``X``.

    Every training row gets an out-of-bag prediction from the trees that did not
    sample it; rows sampled by every tree fall back to the full-forest
    prediction.
    """
    config = config or ForestConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    target = np.asarray(target, dtype=np.float64)
    n = X.shape[0]
    if target.shape != (n,):
        raise ValueError("target must have one value per row of X")
    if n < 2 * config.min_leaf:
        raise ValueError(f"need at least 2 * min_leaf = {2 * config.min_leaf} samples, got {n}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(target))):
        raise ValueError("covariates and target must be finite")

    ens = grow_ensemble(X, target, np.zeros(n), np.zeros(n, np.int8), config,
                        causal=False, stream=stream, threads=threads)
    sizes = ens.est_hi - ens.est_lo
    with np.errstate(invalid="ignore", divide="ignore"):
        leaf_value = np.where(sizes > 0, ens.leaf_sums(target) / np.maximum(sizes, 1), 0.0)

    total, _, used = ens.sums(X, leaf_value, leaf_value, oob_rows=n)
    full_total, _, full_used = ens.sums(X, leaf_value, leaf_value)
    with np.errstate(invalid="ignore", divide="ignore"):
        oob = np.where(used > 0, total / np.maximum(used, 1), full_total / full_used)
    return RegressionForest(config, ens, leaf_value, oob, X.shape[1])
