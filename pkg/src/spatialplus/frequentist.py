"""Penalized least squares with REML/GCV smoothing selection.

The spatial effect enters through a :class:`~spatialplus.basis.BasisFactor`;
in that parameterization the penalty is ``lam * ||gamma_pen||^2`` so the
penalty matrix is the identity on the penalized block and zero elsewhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg

from .errors import DataError, NumericError, ParameterError, SingularityError

Z95 = 1.959963984540054
LOG_LAMBDA_BRACKET = (-15.0, 15.0)
LOG_LAMBDA_TOL = 1e-6
_GRID_STEP = 0.5
_INVPHI = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass(eq=False)
class PenalizedFit:
    beta: np.ndarray
    gamma_pen: np.ndarray
    gamma_unpen: np.ndarray
    lam: float
    sigma2_hat: float
    edf: float
    cov_beta: np.ndarray
    fitted: np.ndarray
    criterion: str = "fixed"

    @property
    def se(self):
        return np.sqrt(np.diag(self.cov_beta))

    @property
    def ci(self):
        se = self.se
        return self.beta - Z95 * se, self.beta + Z95 * se


@dataclass(eq=False)
class SpatialPlusFreqFit:
    stage1: list
    residuals: np.ndarray
    stage2: PenalizedFit
    extra: dict = field(default_factory=dict)

    @property
    def beta(self):
        return self.stage2.beta

    @property
    def se(self):
        return self.stage2.se

    @property
    def ci(self):
        return self.stage2.ci


class _Design:
    """Cross-products of ``C = [covars, V, U]`` reused across smoothing values."""

    def __init__(self, y, covars, basis):
        y = np.asarray(y, dtype=float).reshape(-1)
        n = y.shape[0]
        if covars is None:
            covars = np.empty((n, 0))
        covars = np.asarray(covars, dtype=float)
        if covars.ndim == 1:
            covars = covars[:, None]
        if covars.shape[0] != n or basis.n != n:
            raise ParameterError("y, covariates and basis disagree on the number of rows")
        bad = ~np.isfinite(y) | ~np.all(np.isfinite(covars), axis=1)
        if np.any(bad):
            raise DataError(f"non-finite response or covariate in row {int(np.argmax(bad))}")
        self.y = y
        self.p = covars.shape[1]
        self.k = basis.k
        self.q = basis.q
        self.C = np.hstack([covars, basis.V, basis.U])
        m = self.C.shape[1]
        if n <= self.p + self.q:
            raise ParameterError(f"n = {n} must exceed p + q = {self.p + self.q}")
        self.CtC = self.C.T @ self.C
        self.Cty = self.C.T @ y
        self.yty = float(y @ y)
        self.pen = np.zeros(m)
        self.pen[self.p:self.p + self.k] = 1.0
        self.n = n

    def factor(self, lam):
        A = self.CtC + np.diag(lam * self.pen)
        try:
            cf = linalg.cho_factor(A, lower=True, check_finite=True)
        except linalg.LinAlgError as exc:
            raise SingularityError(
                f"penalized normal equations are singular at lambda = {lam:g}"
            ) from exc
        diag = np.diag(cf[0])
        if np.min(diag) <= np.sqrt(np.finfo(float).eps) * np.max(diag) * 1e-4:
            raise SingularityError(f"penalized design is rank deficient at lambda = {lam:g}")
        return cf

    def solve(self, lam):
        cf = self.factor(lam)
        theta = linalg.cho_solve(cf, self.Cty)
        return cf, theta


def _check_lambda(lam):
    lam = float(lam)
    if not np.isfinite(lam) or lam < 0:
        raise ParameterError(f"lambda must be a finite non-negative number, got {lam}")
    return lam


def _fit_from_design(d, lam, criterion="fixed"):
    cf, theta = d.solve(lam)
    fitted = d.C @ theta
    rss = float(np.sum((d.y - fitted) ** 2))
    Ainv = linalg.cho_solve(cf, np.eye(d.C.shape[1]))
    edf = float(np.sum(Ainv * d.CtC))
    dof = d.n - edf
    sigma2 = rss / dof if dof > 0 else np.nan
    p, k = d.p, d.k
    cov = Ainv[:p, :p] * sigma2
    cov = 0.5 * (cov + cov.T)
    return PenalizedFit(
        beta=theta[:p],
        gamma_pen=theta[p:p + k],
        gamma_unpen=theta[p + k:],
        lam=lam,
        sigma2_hat=sigma2,
        edf=edf,
        cov_beta=cov,
        fitted=fitted,
        criterion=criterion,
    )


def fit_pls(y, covars, basis, lam):
    """Minimize ``||y - C theta||^2 + lam * ||gamma_pen||^2`` with ``C = [covars, V, U]``.

    ``covars`` may be ``None`` or an (n, p) array. The covariance of the
    covariate block is ``(C'C + lam D)^{-1} sigma2_hat``.
    """
    lam = _check_lambda(lam)
    return _fit_from_design(_Design(y, covars, basis), lam)


def _reml_at(d, log_lam):
    lam = np.exp(log_lam)
    cf, theta = d.solve(lam)
    m_unpen = d.p + d.q
    rss_pen = d.yty - float(theta @ d.Cty)
    sigma2 = rss_pen / (d.n - m_unpen)
    logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
    return (
        -0.5 * (d.n - m_unpen) * (np.log(2 * np.pi * sigma2) + 1.0)
        - 0.5 * logdet
        + 0.5 * d.k * log_lam
    )


def _neg_gcv_at(d, log_lam):
    lam = np.exp(log_lam)
    cf, theta = d.solve(lam)
    rss = float(np.sum((d.y - d.C @ theta) ** 2))
    edf = float(np.sum(linalg.cho_solve(cf, d.CtC).diagonal()))
    return -d.n * rss / (d.n - edf) ** 2


def reml_criterion(y, covars, basis, log_lam):
    """Restricted log-likelihood with the residual variance profiled out."""
    return float(_reml_at(_Design(y, covars, basis), float(log_lam)))


def _golden_max(f, lo, hi, tol):
    a, b = lo, hi
    c = b - _INVPHI * (b - a)
    e = a + _INVPHI * (b - a)
    fc, fe = f(c), f(e)
    while b - a > tol:
        if fc >= fe:
            b, e, fe = e, c, fc
            c = b - _INVPHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, e, fe
            e = a + _INVPHI * (b - a)
            fe = f(e)
    return 0.5 * (a + b)


def _select(d, criterion):
    if criterion == "reml":
        crit = _reml_at
    elif criterion == "gcv":
        crit = _neg_gcv_at
    else:
        raise ParameterError(f"unknown smoothing criterion {criterion!r}")

    def f(t):
        val = crit(d, t)
        if not np.isfinite(val):
            raise NumericError(f"{criterion} criterion is not finite at log-lambda = {t:.6g}",
                               term=criterion)
        return val

    lo, hi = LOG_LAMBDA_BRACKET
    grid = np.arange(lo, hi + 0.5 * _GRID_STEP, _GRID_STEP)
    vals = np.array([f(t) for t in grid])
    i = int(np.argmax(vals))
    a = grid[max(i - 1, 0)]
    b = grid[min(i + 1, len(grid) - 1)]
    t = _golden_max(f, a, b, LOG_LAMBDA_TOL)
    # keep the grid point when the refined point is not better (flat criterion)
    if f(t) < vals[i]:
        t = grid[i]
    return float(np.exp(t))


def reml_select_lambda(y, covars, basis, criterion="reml"):
    """Select the smoothing parameter and return ``(lam, fit)``.

    The criterion is scanned on a half-unit grid over ``log(lam)`` in
    [-15, 15]; the best grid cell is refined by golden-section search to a
    width of 1e-6.
    """
    d = _Design(y, covars, basis)
    lam = _select(d, criterion)
    return lam, _fit_from_design(d, lam, criterion=criterion)


def fit_spatial_freq(dataset, basis, criterion="reml"):
    """Standard spatial model: ``y`` on ``[X, V, U]`` with selected smoothing."""
    _, fit = reml_select_lambda(dataset.y, dataset.X, basis, criterion=criterion)
    return fit


def fit_spatial_plus_freq(dataset, basis, criterion="reml"):
    """Two-stage spatial+ fit.

    Each covariate is smoothed on ``[V, U]``; the stage-1 residuals replace
    the covariates in the stage-2 model for ``y``. Reported uncertainty is
    that of stage 2 only.
    """
    stage1 = []
    resid = np.empty_like(dataset.X)
    for j in range(dataset.p):
        _, f1 = reml_select_lambda(dataset.X[:, j], None, basis, criterion=criterion)
        stage1.append(f1)
        resid[:, j] = dataset.X[:, j] - f1.fitted
    _, f2 = reml_select_lambda(dataset.y, resid, basis, criterion=criterion)
    return SpatialPlusFreqFit(stage1=stage1, residuals=resid, stage2=f2)
