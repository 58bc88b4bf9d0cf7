"""Reference computations written independently of the package code, used to
derive expected values in the tests."""
import math

import numpy as np


def sine_day_fine(tmin, tmax, steps=86_400):
    """(gdd, edd) of one day by midpoint integration with ``steps`` steps."""
    h = (np.arange(steps) + 0.5) * 24.0 / steps
    T = (tmax + tmin) / 2 + (tmax - tmin) / 2 * np.sin(2 * np.pi * h / 24)
    edd = float(np.mean(np.maximum(T - 30.0, 0.0)))
    return float(np.mean(np.maximum(T - 8.0, 0.0))) - edd, edd


def dense_reml_deviance(theta, y, X, Z_list):
    """-2 REML log-likelihood (up to a constant) with sigma^2 profiled out,
    built from the full n x n covariance."""
    n, p = X.shape
    V = np.eye(n)
    for t, Z in zip(theta, Z_list):
        V = V + math.exp(t) * Z @ Z.T
    Vi = np.linalg.inv(V)
    XtViX = X.T @ Vi @ X
    beta = np.linalg.solve(XtViX, X.T @ Vi @ y)
    r = y - X @ beta
    s2 = float(r @ Vi @ r) / (n - p)
    return (np.linalg.slogdet(V)[1] + np.linalg.slogdet(XtViX)[1] + (n - p) * math.log(s2)), beta


def indicator(labels):
    u, inv = np.unique(labels, return_inverse=True)
    Z = np.zeros((len(labels), len(u)))
    Z[np.arange(len(labels)), inv] = 1.0
    return Z


def gls(y, X, V):
    Vi = np.linalg.inv(V)
    cov = np.linalg.inv(X.T @ Vi @ X)
    return cov @ X.T @ Vi @ y, cov


def brute_quintile(effects, cov, q=0.2):
    n = len(effects)
    k = max(1, int(math.floor(q * n)))
    idx = list(range(n))
    # insertion sort by (covariate, index): stable by construction
    for i in range(1, n):
        j = i
        while j > 0 and (cov[idx[j - 1]], idx[j - 1]) > (cov[idx[j]], idx[j]):
            idx[j - 1], idx[j] = idx[j], idx[j - 1]
            j -= 1
    top = sum(effects[i] for i in idx[-k:]) / k
    bottom = sum(effects[i] for i in idx[:k]) / k
    return top, bottom, sum(effects) / n


def brute_bins(values, edges):
    """Bin index per value with a plain loop; end bins absorb the overflow."""
    out = []
    nb = len(edges) - 1
    for v in values:
        b = 0
        for k in range(1, nb):
            if v >= edges[k]:
                b = k
        out.append(b)
    return out


def brute_ols(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    slope = sxy / sxx
    return slope, my - slope * mx


def brute_percentile(values, p):
    """Linear-interpolation percentile (the usual 'linear' definition)."""
    s = sorted(values)
    pos = p / 100.0 * (len(s) - 1)
    lo = int(math.floor(pos))
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (pos - lo) * (s[hi] - s[lo])


def brute_cell_means(keys, effects):
    """{cell key: (mean, count)} by dictionary accumulation."""
    acc = {}
    for k, e in zip(keys, effects):
        total, n = acc.get(k, (0.0, 0))
        acc[k] = (total + e, n + 1)
    return {k: (t / n, n) for k, (t, n) in acc.items()}


def brute_spatial_cells(lat, lon, side_km, radius_km=6371.0088):
    """Cell index per point: equirectangular offsets from the centroid, then
    floor division with cells centred on the origin."""
    lat0 = sum(lat) / len(lat)
    lon0 = sum(lon) / len(lon)
    k = math.pi / 180.0 * radius_km
    out = []
    for a, b in zip(lat, lon):
        east = (b - lon0) * k * math.cos(math.radians(lat0))
        north = (a - lat0) * k
        out.append((math.floor(east / side_km + 0.5), math.floor(north / side_km + 0.5)))
    return out
