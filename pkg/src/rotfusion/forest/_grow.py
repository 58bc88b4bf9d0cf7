"""Numba kernels for growing and traversing honest trees.

Splits are searched over per-covariate histograms (at most 256 bins, see
``bin_covariates``); thresholds are stored in raw covariate units so
prediction never needs the binning. A tree is stored as flat node arrays (``feature``, ``threshold``, ``left``,
``right``) plus, for every node, the half-open range ``[est_lo, est_hi)`` into a
permuted copy of the estimation-half sample indices. Leaves therefore carry
their honest sample sets without any extra bookkeeping.

Two split rules share one grower:

* regression: CART variance reduction on the raw target;
* causal: variance reduction on the gradient pseudo-outcome
  ``rho_i = W~_i * (Y~_i - W~_i * tau_parent)`` where ``tau_parent`` is the
  residual-on-residual slope in the parent node.
"""
from __future__ import annotations

import numpy as np
from numba import njit

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


@njit(cache=True, nogil=True)
def _splitmix(state):
    state = state + _GOLDEN
    z = state
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    z = z ^ (z >> np.uint64(31))
    return state, z


@njit(cache=True, nogil=True)
def _randbelow(state, m):
    state, z = _splitmix(state)
    u = (z >> np.uint64(11)) * (1.0 / 9007199254740992.0)
    r = int(u * m)
    if r >= m:
        r = m - 1
    return state, r


@njit(cache=True, nogil=True)
def grow_tree(codes, cuts, n_bins, target, treat_resid, arm, struct_idx, est_idx, causal,
              min_leaf, mtry, key):
    """Grow one honest tree by histogram split search.

    Args:
        codes: (p, n) uint8 bin index of every covariate value.
        cuts: (p, max_bins - 1) threshold between bin k and k + 1 in raw units.
        n_bins: (p,) number of bins used by each covariate.
        target: (n,) regression target, or outcome residuals in causal mode.
        treat_resid: (n,) treatment residuals (causal mode only).
        arm: (n,) int8 treatment labels, used to keep both arms in every child.
        struct_idx: sample indices that choose splits.
        est_idx: sample indices that populate leaves.
        causal: select the pseudo-outcome split rule.
        min_leaf: minimum structure and estimation samples per child.
        mtry: number of candidate covariates per node.
        key: uint64 seed for candidate-covariate sampling.

    Returns:
        (feature, threshold, left, right, est_lo, est_hi, est_perm)
    """
    n_struct = struct_idx.shape[0]
    n_est = est_idx.shape[0]
    p = codes.shape[0]
    if mtry > p:
        mtry = p
    S = struct_idx.copy()
    E = est_idx.copy()
    max_bins = cuts.shape[1] + 1

    cap = 2 * (n_struct // min_leaf) + 3
    feature = np.full(cap, -1, np.int64)
    threshold = np.zeros(cap)
    left = np.full(cap, -1, np.int64)
    right = np.full(cap, -1, np.int64)
    s_lo = np.zeros(cap, np.int64)
    s_hi = np.zeros(cap, np.int64)
    e_lo = np.zeros(cap, np.int64)
    e_hi = np.zeros(cap, np.int64)

    s_hi[0] = n_struct
    e_hi[0] = n_est
    n_nodes = 1
    stack = np.empty(cap, np.int64)
    stack[0] = 0
    top = 1

    state = key
    feats = np.arange(p)
    rho = np.empty(max(n_struct, 1))
    h_rho = np.empty(max_bins)
    h_cnt = np.empty(max_bins, np.int64)
    h_trt = np.empty(max_bins, np.int64)
    h_est = np.empty(max_bins, np.int64)
    buf = np.empty(max(n_struct, n_est, 1), np.int64)

    while top > 0:
        top -= 1
        node = stack[top]
        a = s_lo[node]
        b = s_hi[node]
        c = e_lo[node]
        d = e_hi[node]
        ns = b - a
        ne = d - c
        if ns < 2 * min_leaf or ne < 2 * min_leaf:
            continue

        n_treated = 0
        if causal:
            sww = 0.0
            swy = 0.0
            for k in range(a, b):
                i = S[k]
                sww += treat_resid[i] * treat_resid[i]
                swy += treat_resid[i] * target[i]
            if sww <= 0.0:
                continue
            tau = swy / sww
            for k in range(a, b):
                i = S[k]
                rho[k - a] = treat_resid[i] * (target[i] - treat_resid[i] * tau)
                n_treated += arm[i]
            if n_treated < 2 or ns - n_treated < 2:
                continue
        else:
            for k in range(a, b):
                rho[k - a] = target[S[k]]

        total = 0.0
        sq = 0.0
        for k in range(ns):
            total += rho[k]
            sq += rho[k] * rho[k]
        parent = total * total / ns
        spread = sq - parent
        if spread <= 0.0:
            continue
        best_gain = parent + 1e-12 * spread
        best_f = -1
        best_bin = -1

        # partial Fisher-Yates draw of mtry covariates, scanned in index order
        for j in range(mtry):
            state, r = _randbelow(state, p - j)
            r += j
            tmp = feats[j]
            feats[j] = feats[r]
            feats[r] = tmp
        chosen = np.sort(feats[:mtry])

        for f in chosen:
            nb = n_bins[f]
            if nb < 2:
                continue
            h_rho[:nb] = 0.0
            h_cnt[:nb] = 0
            h_trt[:nb] = 0
            h_est[:nb] = 0
            lo_bin = nb
            hi_bin = -1
            cf = codes[f]
            for k in range(ns):
                i = S[a + k]
                q = cf[i]
                h_rho[q] += rho[k]
                h_cnt[q] += 1
                h_trt[q] += arm[i]
                if q < lo_bin:
                    lo_bin = q
                if q > hi_bin:
                    hi_bin = q
            if lo_bin == hi_bin:
                continue
            for k in range(c, d):
                h_est[cf[E[k]]] += 1
            cum = 0.0
            n_left = 0
            trt_left = 0
            est_left = 0
            for q in range(0, nb - 1):
                cum += h_rho[q]
                n_left += h_cnt[q]
                trt_left += h_trt[q]
                est_left += h_est[q]
                if q < lo_bin:
                    continue
                if q >= hi_bin:
                    break
                if n_left < min_leaf or est_left < min_leaf:
                    continue
                n_right = ns - n_left
                if n_right < min_leaf or ne - est_left < min_leaf:
                    break
                if causal:
                    if trt_left < 1 or n_left - trt_left < 1:
                        continue
                    tr = n_treated - trt_left
                    if tr < 1 or n_right - tr < 1:
                        continue
                rest = total - cum
                gain = cum * cum / n_left + rest * rest / n_right
                if gain > best_gain:
                    best_gain = gain
                    best_f = f
                    best_bin = q

        if best_f < 0:
            continue

        cf = codes[best_f]
        nl = 0
        for k in range(a, b):
            if cf[S[k]] <= best_bin:
                buf[nl] = S[k]
                nl += 1
        m = nl
        for k in range(a, b):
            if cf[S[k]] > best_bin:
                buf[m] = S[k]
                m += 1
        for k in range(ns):
            S[a + k] = buf[k]
        el = 0
        for k in range(c, d):
            if cf[E[k]] <= best_bin:
                buf[el] = E[k]
                el += 1
        m = el
        for k in range(c, d):
            if cf[E[k]] > best_bin:
                buf[m] = E[k]
                m += 1
        for k in range(ne):
            E[c + k] = buf[k]

        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feature[node] = best_f
        threshold[node] = cuts[best_f, best_bin]
        left[node] = lc
        right[node] = rc
        s_lo[lc] = a
        s_hi[lc] = a + nl
        e_lo[lc] = c
        e_hi[lc] = c + el
        s_lo[rc] = a + nl
        s_hi[rc] = b
        e_lo[rc] = c + el
        e_hi[rc] = d
        stack[top] = rc
        top += 1
        stack[top] = lc
        top += 1

    return (feature[:n_nodes].copy(), threshold[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), e_lo[:n_nodes].copy(), e_hi[:n_nodes].copy(), E)


@njit(cache=True, nogil=True)
def find_leaf(x, feature, threshold, left, right, off):
    node = 0
    while left[off + node] >= 0:
        if x[feature[off + node]] <= threshold[off + node]:
            node = left[off + node]
        else:
            node = right[off + node]
    return node


@njit(cache=True, nogil=True)
def forest_sums(X, feature, threshold, left, right, node_off, val_a, val_b, leaf_size,
                inbag, skip_inbag):
    """Accumulate per-leaf statistics over trees for every row of ``X``.

    Trees whose reached leaf is empty, and (when ``skip_inbag``) trees that used
    the row for training, are left out. Returns (sum_a, sum_b, n_trees_used).
    """
    n = X.shape[0]
    n_trees = node_off.shape[0] - 1
    sum_a = np.zeros(n)
    sum_b = np.zeros(n)
    used = np.zeros(n, np.int64)
    for t in range(n_trees):
        off = node_off[t]
        for r in range(n):
            if skip_inbag and inbag[t, r]:
                continue
            leaf = off + find_leaf(X[r], feature, threshold, left, right, off)
            if leaf_size[leaf] == 0:
                continue
            sum_a[r] += val_a[leaf]
            sum_b[r] += val_b[leaf]
            used[r] += 1
    return sum_a, sum_b, used


@njit(cache=True, nogil=True)
def inbag_matrix(n_rows, bag_flat, bag_off):
    n_trees = bag_off.shape[0] - 1
    out = np.zeros((n_trees, n_rows), np.bool_)
    for t in range(n_trees):
        for k in range(bag_off[t], bag_off[t + 1]):
            out[t, bag_flat[k]] = True
    return out


@njit(cache=True, nogil=True)
def leaf_weights(x, feature, threshold, left, right, node_off, est_lo, est_hi, est_flat,
                 est_off, n_train):
    """Neighbourhood weights alpha_i(x): per tree, 1/|leaf| on the leaf's
    estimation samples, averaged over trees with a non-empty leaf."""
    w = np.zeros(n_train)
    n_trees = node_off.shape[0] - 1
    used = 0
    for t in range(n_trees):
        off = node_off[t]
        leaf = off + find_leaf(x, feature, threshold, left, right, off)
        lo = est_lo[leaf]
        hi = est_hi[leaf]
        if hi <= lo:
            continue
        inv = 1.0 / (hi - lo)
        base = est_off[t]
        for k in range(lo, hi):
            w[est_flat[base + k]] += inv
        used += 1
    if used > 0:
        w /= used
    return w
