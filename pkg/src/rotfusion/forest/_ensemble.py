from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .. import _rng
from . import _grow
from .config import ForestConfig

log = logging.getLogger(__name__)


@dataclass
class TreeEnsemble:
    """Packed honest trees.

    Node arrays of all trees are concatenated; ``node_off[t]`` is where tree
    ``t`` starts. ``est_lo``/``est_hi`` index into that tree's slice of
    ``est_flat`` (which starts at ``est_off[t]``). ``bag_flat`` holds every
    sample a tree touched (structure and estimation halves), used for
    out-of-bag prediction.
    """

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    est_lo: np.ndarray
    est_hi: np.ndarray
    node_off: np.ndarray
    est_flat: np.ndarray
    est_off: np.ndarray
    bag_flat: np.ndarray
    bag_off: np.ndarray
    tree_ids: np.ndarray

    @property
    def n_trees(self) -> int:
        return len(self.node_off) - 1

    @property
    def leaf_size(self) -> np.ndarray:
        return np.where(self.left < 0, self.est_hi - self.est_lo, 0)

    def global_est(self, t: int) -> np.ndarray:
        return self.est_flat[self.est_off[t]:self.est_off[t + 1]]

    def leaf_sums(self, values: np.ndarray) -> np.ndarray:
        """Sum of ``values`` over the estimation samples of every node."""
        out = np.zeros(len(self.feature))
        for t in range(self.n_trees):
            lo, hi = self.node_off[t], self.node_off[t + 1]
            est = values[self.global_est(t)]
            csum = np.concatenate([[0.0], np.cumsum(est)])
            out[lo:hi] = csum[self.est_hi[lo:hi]] - csum[self.est_lo[lo:hi]]
        return out

    def inbag(self, n_rows: int) -> np.ndarray:
        return _grow.inbag_matrix(n_rows, self.bag_flat, self.bag_off)

    def sums(self, X, val_a, val_b, *, oob_rows: int | None = None):
        """Per-row sums of leaf values. With ``oob_rows`` set, ``X`` must be the
        training matrix and trees that saw a row are skipped for it."""
        X = np.ascontiguousarray(X, dtype=np.float64)
        if oob_rows is not None:
            inbag = self.inbag(oob_rows)
        else:
            inbag = np.zeros((1, 1), np.bool_)
        return _grow.forest_sums(X, self.feature, self.threshold, self.left, self.right,
                                 self.node_off, val_a, val_b, self.leaf_size, inbag,
                                 oob_rows is not None)

    def weights(self, x: np.ndarray, n_train: int) -> np.ndarray:
        x = np.ascontiguousarray(x, dtype=np.float64)
        return _grow.leaf_weights(x, self.feature, self.threshold, self.left, self.right,
                                  self.node_off, self.est_lo, self.est_hi, self.est_flat,
                                  self.est_off, n_train)

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in self.__dataclass_fields__}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "TreeEnsemble":
        return cls(**{name: np.asarray(arrays[name]) for name in cls.__dataclass_fields__})


MAX_BINS = 256


def bin_covariates(X: np.ndarray, max_bins: int = MAX_BINS):
    """Quantize each covariate into at most ``max_bins`` ordered bins.

    Covariates with few distinct values get one bin per value, which makes the
    histogram split search exact. Cut points sit halfway between the largest
    value of one bin and the smallest of the next, so ``x <= cuts[f, k]`` holds
    exactly for the training rows with ``codes[f] <= k``.

    Returns:
        codes (p, n) uint8, cuts (p, max_bins - 1) float64, n_bins (p,) int64
    """
    n, p = X.shape
    codes = np.empty((p, n), np.uint8)
    cuts = np.full((p, max_bins - 1), np.inf)
    n_bins = np.empty(p, np.int64)
    for f in range(p):
        u = np.unique(X[:, f])
        if len(u) <= max_bins:
            lo, hi = u[:-1], u[1:]
        else:
            probes = np.quantile(X[:, f], np.arange(1, max_bins) / max_bins)
            j = np.unique(np.clip(np.searchsorted(u, probes, side="right"), 1, len(u) - 1))
            lo, hi = u[j - 1], u[j]
        mid = lo + 0.5 * (hi - lo)
        mid = np.where(mid >= hi, lo, mid)
        cuts[f, :len(mid)] = mid
        n_bins[f] = len(mid) + 1
        codes[f] = np.searchsorted(mid, X[:, f], side="left")
    return codes, cuts, n_bins


def draw_halves(n: int, config: ForestConfig, stream: int, t: int):
    """Subsample for tree ``t`` split into (structure, estimation) halves."""
    rng = _rng.unit_generator(config.seed, stream, t)
    size = max(2, int(math.ceil(config.subsample_fraction * n)))
    size = min(size, n)
    picked = rng.permutation(n)[:size]
    n_struct = max(1, int(math.floor(size * config.honesty_fraction)))
    n_struct = min(n_struct, size - 1)
    return np.sort(picked[:n_struct]), np.sort(picked[n_struct:])


def grow_ensemble(X, target, treat_resid, arm, config: ForestConfig, *, causal: bool,
                  stream: int, threads: int = 1) -> TreeEnsemble:
    """Grow ``config.n_trees`` honest trees.

    Tree ``t`` depends only on (data, config, stream, t), so the result is the
    same for any worker count.
    """
    X = np.ascontiguousarray(X, dtype=np.float64)
    n = X.shape[0]
    target = np.ascontiguousarray(target, dtype=np.float64)
    treat_resid = np.ascontiguousarray(treat_resid, dtype=np.float64)
    arm = np.ascontiguousarray(arm, dtype=np.int8)
    codes, cuts, n_bins = bin_covariates(X)

    def one(t: int):
        struct, est = draw_halves(n, config, stream, t)
        if causal and not np.any(treat_resid[np.concatenate([struct, est])] != 0.0):
            return None
        key = _rng.unit_key(config.seed, stream, t)
        grown = _grow.grow_tree(codes, cuts, n_bins, target, treat_resid, arm, struct, est, causal,
                                config.min_leaf, config.mtry, key)
        return grown, struct, est

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, range(config.n_trees)))
    else:
        results = [one(t) for t in range(config.n_trees)]

    skipped = [t for t, r in enumerate(results) if r is None]
    if skipped:
        log.warning("skipped %d tree(s) with no treatment variation in the subsample: %s",
                    len(skipped), skipped[:10])
    kept = [(t, r) for t, r in enumerate(results) if r is not None]
    if not kept:
        raise ValueError("every subsample had zero residual treatment variation")
    return _pack(kept)


def _pack(kept) -> TreeEnsemble:
    parts: dict[str, list] = {k: [] for k in
                              ("feature", "threshold", "left", "right", "est_lo", "est_hi",
                               "est_flat", "bag_flat")}
    node_off = [0]
    est_off = [0]
    bag_off = [0]
    for _, ((feat, thr, lft, rgt, elo, ehi, eperm), struct, est) in kept:
        parts["feature"].append(feat)
        parts["threshold"].append(thr)
        parts["left"].append(lft)
        parts["right"].append(rgt)
        parts["est_lo"].append(elo)
        parts["est_hi"].append(ehi)
        parts["est_flat"].append(eperm)
        bag = np.concatenate([struct, est])
        parts["bag_flat"].append(bag)
        node_off.append(node_off[-1] + len(feat))
        est_off.append(est_off[-1] + len(eperm))
        bag_off.append(bag_off[-1] + len(bag))
    packed = {k: np.concatenate(v) for k, v in parts.items()}
    return TreeEnsemble(
        node_off=np.asarray(node_off, np.int64),
        est_off=np.asarray(est_off, np.int64),
        bag_off=np.asarray(bag_off, np.int64),
        tree_ids=np.asarray([t for t, _ in kept], np.int64),
        **packed,
    )
