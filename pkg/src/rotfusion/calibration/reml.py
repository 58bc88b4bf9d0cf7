"""REML for linear models with crossed random intercepts.

    y = X beta + sum_k Z_k u_k + eps,   u_k ~ N(0, s2_k I),  eps ~ N(0, s2 I)

Writing g_k = s2_k / s2 and V0 = I + sum_k g_k Z_k Z_k', the residual
variance s2 and beta are profiled out, leaving the restricted deviance

    -2 l_R(g) = (n - p) log(r' V0^-1 r / (n - p)) + log|V0| + log|X' V0^-1 X| + c

which is minimized over theta = log g with L-BFGS-B. With q = total number of
random-effect levels, the Woodbury identity reduces every solve to q x q:

    V0^-1 = I - Z d M^-1 d Z',   M = I + d Z'Z d,   d = sqrt(g) per level
    log|V0| = log|M|
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, optimize

THETA_FLOOR = -12.0
THETA_CEIL = 12.0
_START_GRID = (-3.0, 0.0, 2.0)


class RemlError(RuntimeError):
    """Variance-component optimization failed; carries the optimizer trace."""

    def __init__(self, message: str, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


@dataclass
class MixedModelResult:
    beta: np.ndarray
    cov_beta: np.ndarray
    var_components: dict[str, float]   # one per random term, plus "resid"
    deviance: float                    # -2 restricted log-likelihood
    converged: bool
    status: str
    n_iter: int
    trace: list[float] = field(default_factory=list)
    blups: dict[str, dict] = field(default_factory=dict)

    @property
    def loglik(self) -> float:
        return -0.5 * self.deviance

    @property
    def se_beta(self) -> np.ndarray:
        return np.sqrt(np.maximum(np.diag(self.cov_beta), 0.0))


def _indicator_codes(labels):
    levels, codes = np.unique(np.asarray(labels), return_inverse=True)
    return levels, codes.astype(np.int64)


class _Problem:
    """Sufficient statistics of one fit; every evaluation is O(q^3)."""

    def __init__(self, y, X, groups: dict[str, np.ndarray]):
        self.y = y
        self.X = X
        self.n, self.p = X.shape
        self.names = list(groups)
        self.levels = []
        cols = []
        offset = 0
        self.slices = []
        for name in self.names:
            lv, codes = _indicator_codes(groups[name])
            self.levels.append(lv)
            cols.append(codes + offset)
            self.slices.append(slice(offset, offset + len(lv)))
            offset += len(lv)
        self.q = offset
        Z = np.zeros((self.n, self.q))
        rows = np.arange(self.n)
        for c in cols:
            Z[rows, c] = 1.0
        self.Z = Z
        self.ZtZ = Z.T @ Z
        self.ZtX = Z.T @ X
        self.Zty = Z.T @ y
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        with np.errstate(over="ignore"):
            self.yty = float(y @ y)

    def ratios(self, theta) -> np.ndarray:
        g = np.empty(self.q)
        for k, sl in enumerate(self.slices):
            t = theta[k]
            g[sl] = 0.0 if t <= THETA_FLOOR else math.exp(t)
        return g

    def gls(self, g: np.ndarray):
        """Profiled quantities at fixed variance ratios ``g`` (one per level)."""
        d = np.sqrt(g)
        M = np.eye(self.q) + d[:, None] * self.ZtZ * d[None, :]
        cf = linalg.cho_factor(M, lower=True)
        logdet_v = 2.0 * np.sum(np.log(np.diag(cf[0])))
        A = d[:, None] * self.ZtX
        b = d * self.Zty
        MA = linalg.cho_solve(cf, A)
        Mb = linalg.cho_solve(cf, b)
        XVX = self.XtX - A.T @ MA
        XVy = self.Xty - A.T @ Mb
        yVy = self.yty - b @ Mb
        cx = linalg.cho_factor(XVX, lower=True)
        beta = linalg.cho_solve(cx, XVy)
        rss = max(yVy - beta @ XVy, 0.0)
        logdet_x = 2.0 * np.sum(np.log(np.diag(cx[0])))
        return beta, rss, logdet_v, logdet_x, cx, cf, d

    def deviance(self, theta) -> float:
        try:
            _, rss, ldv, ldx, *_ = self.gls(self.ratios(theta))
        except (linalg.LinAlgError, ValueError):
            return np.inf
        dof = self.n - self.p
        if rss <= 0.0:
            return -np.inf
        return dof * math.log(rss / dof) + ldv + ldx + dof * (1.0 + math.log(2 * math.pi))


def fit_reml(y, X, groups: dict[str, np.ndarray], *, max_iter: int = 200,
             fixed_theta: dict[str, float] | None = None,
             with_blups: bool = False) -> MixedModelResult:
    """Fit by REML.

    Args:
        y: (n,) response.
        X: (n, p) fixed-effect design with full column rank.
        groups: random-intercept term name -> (n,) level labels.
        max_iter: optimizer iteration cap; reaching it raises RemlError.
        fixed_theta: hold some log variance ratios fixed; a value at or below
            THETA_FLOOR (e.g. ``-inf``) forces that component to zero.
        with_blups: also return predicted random effects per level.
    """
    y = np.asarray(y, dtype=np.float64)
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    n, p = X.shape
    if y.shape != (n,):
        raise ValueError("y must have one value per row of X")
    if n <= p:
        raise ValueError(f"need more rows ({n}) than fixed effects ({p})")
    if np.linalg.matrix_rank(X) < p:
        raise ValueError("fixed-effect design is singular")

    # scale non-constant columns for conditioning; beta is mapped back below
    scale = np.ones(p)
    for j in range(p):
        sd = X[:, j].std()
        if sd > 0:
            scale[j] = sd
    Xs = X / scale
    prob = _Problem(y, Xs, groups)
    fixed_theta = dict(fixed_theta or {})
    free = [k for k, name in enumerate(prob.names) if name not in fixed_theta]
    theta0 = np.array([max(float(fixed_theta.get(name, 0.0)), THETA_FLOOR - 1.0)
                       if name in fixed_theta else 0.0 for name in prob.names])

    ols_beta, *_ = np.linalg.lstsq(Xs, y, rcond=None)
    with np.errstate(over="ignore", invalid="ignore"):
        ols_rss = float(np.sum((y - Xs @ ols_beta) ** 2))
    if not (math.isfinite(ols_rss) and math.isfinite(prob.yty)):
        raise RemlError("sums of squares overflow; rescale the response", [])
    exact = ols_rss <= 1e-20 * max(prob.yty, 1.0)

    trace: list[float] = []
    status = "converged"
    converged = True
    n_iter = 0
    if exact:
        status = "exact fit: zero residual variance"
        theta = np.full(len(prob.names), THETA_FLOOR - 1.0)
    elif free:
        def objective(t_free):
            t = theta0.copy()
            t[free] = t_free
            return prob.deviance(t)

        grid = np.array(np.meshgrid(*[_START_GRID] * len(free))).reshape(len(free), -1).T
        start = min(grid, key=lambda t: objective(t))
        trace.append(objective(start))

        def record(xk):
            trace.append(float(objective(xk)))

        res = optimize.minimize(objective, start, method="L-BFGS-B",
                                bounds=[(THETA_FLOOR, THETA_CEIL)] * len(free),
                                callback=record,
                                options={"maxiter": max_iter, "ftol": 1e-12, "gtol": 1e-7})
        n_iter = int(res.nit)
        if not np.isfinite(res.fun):
            raise RemlError("restricted likelihood is not finite at the optimum", trace)
        if res.status == 1:
            raise RemlError(f"no convergence after {max_iter} iterations: {res.message}", trace)
        if not res.success:
            status = f"converged with warning: {res.message}"
        theta = theta0.copy()
        theta[free] = res.x
        # within a hair of the floor the component is indistinguishable from zero
        theta[free] = np.where(theta[free] <= THETA_FLOOR + 1e-6, THETA_FLOOR - 1.0, theta[free])
    else:
        theta = theta0

    g = prob.ratios(theta)
    if exact:
        beta_s = ols_beta
        cov_s = np.zeros((p, p))
        s2 = 0.0
        dev = -np.inf
    else:
        beta_s, rss, ldv, ldx, cx, cf, d = prob.gls(g)
        s2 = rss / (n - p)
        cov_s = s2 * linalg.cho_solve(cx, np.eye(p))
        dev = prob.deviance(theta)
    beta = beta_s / scale
    cov = cov_s / np.outer(scale, scale)

    comps = {}
    for k, name in enumerate(prob.names):
        comps[name] = float(g[prob.slices[k].start] * s2)
    comps["resid"] = float(s2)

    blups = {}
    if with_blups and not exact:
        r = y - Xs @ beta_s
        d = np.sqrt(g)
        Ztr = prob.Z.T @ r
        inner = linalg.cho_solve(cf, d * Ztr)
        u = g * Ztr - g * (prob.ZtZ @ (d * inner))
        for k, name in enumerate(prob.names):
            blups[name] = {lv.item() if hasattr(lv, "item") else lv: float(v)
                           for lv, v in zip(prob.levels[k], u[prob.slices[k]])}
    return MixedModelResult(beta, cov, comps, float(dev), converged, status, n_iter, trace, blups)
