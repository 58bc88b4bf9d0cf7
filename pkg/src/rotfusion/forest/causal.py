"""Honest causal forest: orthogonalized residual-on-residual effect estimates
localized by forest neighbourhood weights."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .. import _rng
from ._ensemble import TreeEnsemble, grow_ensemble
from .config import ForestConfig
from .regression import RegressionForest, fit_regression_forest

log = logging.getLogger(__name__)


class NoOverlapError(ValueError):
    """Raised when the weighted treatment-residual variance at a point is zero."""


@dataclass
class CausalForestModel:
    config: ForestConfig
    outcome_model: RegressionForest
    propensity_model: RegressionForest
    ensemble: TreeEnsemble
    X: np.ndarray
    y: np.ndarray
    w: np.ndarray
    y_hat: np.ndarray
    w_hat: np.ndarray
    leaf_wy: np.ndarray
    leaf_ww: np.ndarray

    @property
    def y_resid(self) -> np.ndarray:
        return self.y - self.y_hat

    @property
    def w_resid(self) -> np.ndarray:
        return self.w - self.w_hat

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def _check(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} covariates, got {X.shape[1]}")
        return X

    def _ratio(self, num, den, rows=None):
        bad = ~(den > 0)
        if np.any(bad):
            where = np.flatnonzero(bad)
            if rows is not None:
                where = rows[where]
            raise NoOverlapError(f"no treatment-residual variation in the neighbourhood of "
                                 f"row(s) {where[:10].tolist()}")
        return num / den

    def predict_tau(self, X) -> np.ndarray:
        X = self._check(X)
        num, den, _ = self.ensemble.sums(X, self.leaf_wy, self.leaf_ww)
        return self._ratio(num, den)

    def oob_tau(self) -> np.ndarray:
        """Out-of-bag effect estimates at the training rows."""
        num, den, used = self.ensemble.sums(self.X, self.leaf_wy, self.leaf_ww,
                                            oob_rows=len(self.y))
        missing = used == 0
        if np.any(missing):
            num2, den2, _ = self.ensemble.sums(self.X[missing], self.leaf_wy, self.leaf_ww)
            num[missing], den[missing] = num2, den2
        return self._ratio(num, den)

    def extrapolation_flags(self, X) -> np.ndarray:
        X = self._check(X)
        lo, hi = self.X.min(axis=0), self.X.max(axis=0)
        return np.any((X < lo) | (X > hi), axis=1)

    def predict_propensity(self, X) -> np.ndarray:
        return np.clip(self.propensity_model.predict(self._check(X)), 0.0, 1.0)

    def oob_propensity(self) -> np.ndarray:
        return np.clip(self.w_hat, 0.0, 1.0)

    def neighborhood_weights(self, x) -> np.ndarray:
        """Forest weights alpha_i(x) over the training rows (non-negative, sum to 1)."""
        x = self._check(x)[0]
        return self.ensemble.weights(x, len(self.y))

    def average_treatment_effect(self, clip: float = 1e-3) -> tuple[float, float]:
        """Doubly robust average effect over the training rows and its standard error."""
        tau = self.oob_tau()
        e = np.clip(self.w_hat, clip, 1 - clip)
        mu = self.y_hat + (self.w - self.w_hat) * tau
        psi = tau + (self.w - e) / (e * (1 - e)) * (self.y - mu)
        return float(psi.mean()), float(psi.std(ddof=1) / np.sqrt(len(psi)))


def fit_causal_forest(X, w, y, config: ForestConfig | None = None, *,
                      threads: int = 1) -> CausalForestModel:
    """Fit the causal forest.

    Args:
        X: (n, p) covariates.
        w: (n,) binary treatment, 1 = rotated.
        y: (n,) outcome.
        config: forest hyperparameters; also seeds the centering forests.
        threads: worker threads for tree growing; results do not depend on it.
    """
    config = config or ForestConfig()
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    w_raw = np.asarray(w)
    n = X.shape[0]
    if y.shape != (n,) or w_raw.shape != (n,):
        raise ValueError("w and y must have one value per row of X")
    if not np.all(np.isin(w_raw, (0, 1))):
        raise ValueError("treatment must be binary 0/1")
    w = w_raw.astype(np.float64)
    n_treated = int(w.sum())
    if n_treated == 0 or n_treated == n:
        raise ValueError("both treatment arms must be present")
    if n < 4 * config.min_leaf:
        raise ValueError(f"need at least 4 * min_leaf = {4 * config.min_leaf} samples, got {n}")

    # centering forests are smaller, as in grf: max(50, n_trees / 4)
    centering = replace(config, n_trees=max(50, config.n_trees // 4))
    outcome = fit_regression_forest(X, y, centering, stream=_rng.STREAM_OUTCOME_FOREST,
                                    threads=threads)
    propensity = fit_regression_forest(X, w, centering, stream=_rng.STREAM_PROPENSITY_FOREST,
                                       threads=threads)
    y_hat = outcome.oob_prediction
    w_hat = propensity.oob_prediction
    y_res = y - y_hat
    w_res = w - w_hat

    ens = grow_ensemble(X, y_res, w_res, w.astype(np.int8), config, causal=True,
                        stream=_rng.STREAM_EFFECT_TREES, threads=threads)
    sizes = np.maximum(ens.est_hi - ens.est_lo, 1)
    leaf_wy = ens.leaf_sums(w_res * y_res) / sizes
    leaf_ww = ens.leaf_sums(w_res * w_res) / sizes
    return CausalForestModel(config, outcome, propensity, ens, X, y, w, y_hat, w_hat,
                             leaf_wy, leaf_ww)


def predict_tau(model: CausalForestModel, X) -> np.ndarray:
    return model.predict_tau(X)


def predict_propensity(model: CausalForestModel, X) -> np.ndarray:
    return model.predict_propensity(X)
