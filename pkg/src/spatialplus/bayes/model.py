"""Log densities and gradients of the Bayesian spatial and spatial+ models.

Two evaluation routes are provided. :func:`log_density_joint` works directly
on the n-dimensional residuals and is the reference. The model classes used
by the sampler (:class:`JointModel`, :class:`StandardModel`) evaluate the
same quantities through precomputed cross-products of ``[y, X, V, U]`` so the
per-step cost does not grow with ``n``.

Positive parameters are sampled on the log scale. Spline coefficient blocks
are either sampled directly (``"centered"``) or as standardized coefficients
``gamma = tau * z`` (``"noncentered"``).
"""

from __future__ import annotations

from dataclasses import dataclass, fields, replace

import numpy as np

from ..errors import NumericError, ParameterError

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_2 = float(np.log(2.0))

PARAMETERIZATIONS = ("centered", "noncentered")


@dataclass(frozen=True)
class PriorConfig:
    """Half-normal scales (standard deviations of the underlying normal)."""

    sigma_scale: float = 10.0
    sigma_x_scale: float = 10.0
    xi_scale: float = 100.0
    xi_x_scale: float = 1.0
    tau_scale_standard_model: float = 100.0
    lambda_m_scale: float | None = None

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if not (np.isfinite(v) and v > 0):
                raise ParameterError(f"{f.name} must be a positive number, got {v}")

    def with_lambda_m_scale(self, phi):
        return replace(self, lambda_m_scale=float(phi))

    def as_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}


def half_normal_logpdf(x, scale):
    return LOG_2 - 0.5 * LOG_2PI - np.log(scale) - 0.5 * (x / scale) ** 2


def normal_logpdf_sum(resid_sq_sum, n, var):
    return -0.5 * n * (LOG_2PI + np.log(var)) - 0.5 * resid_sq_sum / var


@dataclass
class JointParams:
    """Parameters of the joint spatial+ model on the constrained scale.

    Covariate-indexed blocks carry a leading axis of length ``p``.
    """

    beta: np.ndarray
    gamma_pen: np.ndarray
    gamma_unpen: np.ndarray
    gamma_x_pen: np.ndarray
    gamma_x_unpen: np.ndarray
    sigma: float
    sigma_x: np.ndarray
    xi: float
    xi_x: np.ndarray
    lambda_m: float

    def __post_init__(self):
        self.beta = np.atleast_1d(np.asarray(self.beta, dtype=float))
        p = self.beta.shape[0]
        self.gamma_pen = np.asarray(self.gamma_pen, dtype=float)
        self.gamma_unpen = np.asarray(self.gamma_unpen, dtype=float)
        self.gamma_x_pen = np.asarray(self.gamma_x_pen, dtype=float).reshape(p, -1)
        self.gamma_x_unpen = np.asarray(self.gamma_x_unpen, dtype=float).reshape(p, -1)
        self.sigma_x = np.asarray(self.sigma_x, dtype=float).reshape(p)
        self.xi_x = np.asarray(self.xi_x, dtype=float).reshape(p)
        self.sigma = float(self.sigma)
        self.xi = float(self.xi)
        self.lambda_m = float(self.lambda_m)

    @property
    def p(self):
        return self.beta.shape[0]

    @property
    def tau2(self):
        return self.sigma**2 * (1.0 / self.lambda_m + self.xi**2)

    @property
    def tau2_x(self):
        return self.tau2 * (self.sigma_x**2 / self.sigma**2) * (1.0 + self.xi_x**2)

    @property
    def lam(self):
        return self.sigma**2 / self.tau2

    @property
    def lam_x(self):
        return self.sigma_x**2 / self.tau2_x


@dataclass
class StandardParams:
    beta: np.ndarray
    gamma_pen: np.ndarray
    gamma_unpen: np.ndarray
    sigma: float
    tau: float

    @property
    def lam(self):
        return self.sigma**2 / self.tau**2


def _check(value, term):
    if not np.isfinite(value):
        raise NumericError(f"log density term '{term}' is not finite", term=term)
    return value


def log_density_joint_terms(params, dataset, basis, prior):
    """Named additive terms of the joint log density (constrained scale)."""
    if prior.lambda_m_scale is None:
        raise ParameterError("prior.lambda_m_scale must be set before evaluating the joint model")
    X = dataset.X
    y = dataset.y
    n, p = X.shape
    if params.p != p:
        raise ParameterError(f"params have {params.p} covariates, data have {p}")
    V, U = basis.V, basis.U
    k = basis.k
    terms = {}
    eps_x = X - V @ params.gamma_x_pen.T - U @ params.gamma_x_unpen.T
    mean_y = eps_x @ params.beta + V @ params.gamma_pen + U @ params.gamma_unpen
    terms["lik_y"] = normal_logpdf_sum(np.sum((y - mean_y) ** 2), n, params.sigma**2)
    terms["lik_x"] = sum(
        normal_logpdf_sum(np.sum(eps_x[:, j] ** 2), n, params.sigma_x[j] ** 2) for j in range(p)
    )
    tau2 = params.tau2
    tau2_x = params.tau2_x
    terms["prior_gamma_pen"] = normal_logpdf_sum(np.sum(params.gamma_pen**2), k, tau2)
    terms["prior_gamma_x_pen"] = sum(
        normal_logpdf_sum(np.sum(params.gamma_x_pen[j] ** 2), k, tau2_x[j]) for j in range(p)
    )
    terms["prior_sigma"] = half_normal_logpdf(params.sigma, prior.sigma_scale)
    terms["prior_sigma_x"] = float(np.sum(half_normal_logpdf(params.sigma_x, prior.sigma_x_scale)))
    terms["prior_xi"] = half_normal_logpdf(params.xi, prior.xi_scale)
    terms["prior_xi_x"] = float(np.sum(half_normal_logpdf(params.xi_x, prior.xi_x_scale)))
    terms["prior_lambda_m"] = half_normal_logpdf(params.lambda_m, prior.lambda_m_scale)
    for name, v in terms.items():
        terms[name] = float(_check(v, name))
    return terms


def log_density_joint(params, dataset, basis, prior):
    """Joint log density of ``y | x``, ``x`` and all priors.

    Flat priors on ``beta`` and the unpenalized blocks contribute zero.
    """
    return float(sum(log_density_joint_terms(params, dataset, basis, prior).values()))


class _Gram:
    """Cross-products of ``[y, X, W]`` with ``W = [V, U]``."""

    def __init__(self, dataset, basis):
        y = dataset.y
        X = dataset.X
        W = np.hstack([basis.V, basis.U])
        self.n = y.shape[0]
        self.p = X.shape[1]
        self.k = basis.k
        self.q = basis.q
        self.m = self.k + self.q
        self.yy = float(y @ y)
        self.Xy = X.T @ y
        self.XX = X.T @ X
        self.Wy = W.T @ y
        self.WX = W.T @ X
        self.WW = W.T @ W
        self.xx = np.diag(self.XX).copy()


class JointModel:
    """Unconstrained log density and gradient of the joint spatial+ model.

    Layout of the unconstrained vector: ``beta (p)``, ``c (k + q)`` for the
    response spline, ``cx (p, k + q)`` for the covariate splines,
    ``log sigma``, ``log sigma_x (p)``, ``log xi``, ``log xi_x (p)``,
    ``log lambda_m``. Under the non-centered parameterization the first
    ``k`` entries of each spline block hold standardized coefficients.
    """

    def __init__(self, dataset, basis, prior, parameterization="noncentered"):
        if prior.lambda_m_scale is None:
            raise ParameterError("prior.lambda_m_scale must be set for the joint model")
        if parameterization not in PARAMETERIZATIONS:
            raise ParameterError(f"parameterization must be one of {PARAMETERIZATIONS}")
        self.prior = prior
        self.parameterization = parameterization
        self.g = _Gram(dataset, basis)
        g = self.g
        p, m = g.p, g.m
        sizes = [("beta", p), ("c", m), ("cx", p * m), ("log_sigma", 1),
                 ("log_sigma_x", p), ("log_xi", 1), ("log_xi_x", p), ("log_lambda_m", 1)]
        self.slices = {}
        start = 0
        for name, size in sizes:
            self.slices[name] = slice(start, start + size)
            start += size
        self.dim = start

    @property
    def noncentered(self):
        return self.parameterization == "noncentered"

    def _split(self, u):
        s = self.slices
        g = self.g
        return (
            u[s["beta"]],
            u[s["c"]],
            u[s["cx"]].reshape(g.p, g.m),
            u[s["log_sigma"]][0],
            u[s["log_sigma_x"]],
            u[s["log_xi"]][0],
            u[s["log_xi_x"]],
            u[s["log_lambda_m"]][0],
        )

    def _scales(self, ls, lsx, lxi, lxix, llm):
        sigma = np.exp(ls)
        sigma_x = np.exp(lsx)
        xi = np.exp(lxi)
        xi_x = np.exp(lxix)
        lam_m = np.exp(llm)
        A = 1.0 / lam_m + xi * xi
        B = 1.0 + xi_x * xi_x
        tau2 = sigma * sigma * A
        tau2_x = sigma_x * sigma_x * A * B
        return sigma, sigma_x, xi, xi_x, lam_m, A, B, tau2, tau2_x

    def constrain(self, u):
        """Map an unconstrained vector to :class:`JointParams`."""
        beta, c, cx, ls, lsx, lxi, lxix, llm = self._split(np.asarray(u, dtype=float))
        sigma, sigma_x, xi, xi_x, lam_m, A, B, tau2, tau2_x = self._scales(ls, lsx, lxi, lxix, llm)
        k = self.g.k
        c = c.copy()
        cx = cx.copy()
        if self.noncentered:
            c[:k] *= np.sqrt(tau2)
            cx[:, :k] *= np.sqrt(tau2_x)[:, None]
        return JointParams(
            beta=beta.copy(), gamma_pen=c[:k], gamma_unpen=c[k:],
            gamma_x_pen=cx[:, :k], gamma_x_unpen=cx[:, k:],
            sigma=sigma, sigma_x=sigma_x, xi=xi, xi_x=xi_x, lambda_m=lam_m,
        )

    def unconstrain(self, params):
        """Inverse of :meth:`constrain`."""
        k = self.g.k
        c = np.concatenate([params.gamma_pen, params.gamma_unpen])
        cx = np.hstack([params.gamma_x_pen, params.gamma_x_unpen]).reshape(self.g.p, self.g.m)
        if self.noncentered:
            c[:k] /= np.sqrt(params.tau2)
            cx[:, :k] /= np.sqrt(params.tau2_x)[:, None]
        return np.concatenate([
            params.beta, c, cx.ravel(), [np.log(params.sigma)], np.log(params.sigma_x),
            [np.log(params.xi)], np.log(params.xi_x), [np.log(params.lambda_m)],
        ])

    def logp_grad(self, u):
        """Log density on the unconstrained scale (log-Jacobian included) and its gradient."""
        g = self.g
        pr = self.prior
        k = g.k
        beta, c, cx, ls, lsx, lxi, lxix, llm = self._split(u)
        sigma, sigma_x, xi, xi_x, lam_m, A, B, tau2, tau2_x = self._scales(ls, lsx, lxi, lxix, llm)
        if self.noncentered:
            tau = np.sqrt(tau2)
            tau_x = np.sqrt(tau2_x)
            z, zx = c[:k], cx[:, :k]
            c = c.copy()
            cx = cx.copy()
            c[:k] = tau * z
            cx[:, :k] = zx * tau_x[:, None]
        s2 = sigma * sigma
        sx2 = sigma_x * sigma_x

        # response equation
        Cx = cx.T  # (m, p)
        a = Cx @ beta - c
        Xb = g.XX @ beta
        ww = g.yy - 2.0 * (beta @ g.Xy) + beta @ Xb
        Ww = g.Wy - g.WX @ beta
        WWa = g.WW @ a
        rr = ww + 2.0 * (a @ Ww) + a @ WWa
        Wr = Ww + WWa
        Xr = (g.Xy - Xb) + g.WX.T @ a
        Er = Xr - Cx.T @ Wr

        # covariate equations
        WWCx = g.WW @ Cx
        ee = g.xx - 2.0 * np.sum(Cx * g.WX, axis=0) + np.sum(Cx * WWCx, axis=0)
        We = g.WX - WWCx  # (m, p)

        gp = c[:k]
        gxp = cx[:, :k]
        gg = gp @ gp
        gxgx = np.sum(gxp * gxp, axis=1)

        lp = (
            -0.5 * g.n * (LOG_2PI + 2.0 * ls) - 0.5 * rr / s2
            + np.sum(-0.5 * g.n * (LOG_2PI + 2.0 * lsx) - 0.5 * ee / sx2)
            - 0.5 * k * (LOG_2PI + np.log(tau2)) - 0.5 * gg / tau2
            + np.sum(-0.5 * k * (LOG_2PI + np.log(tau2_x)) - 0.5 * gxgx / tau2_x)
            + half_normal_logpdf(sigma, pr.sigma_scale)
            + np.sum(half_normal_logpdf(sigma_x, pr.sigma_x_scale))
            + half_normal_logpdf(xi, pr.xi_scale)
            + np.sum(half_normal_logpdf(xi_x, pr.xi_x_scale))
            + half_normal_logpdf(lam_m, pr.lambda_m_scale)
            + ls + np.sum(lsx) + lxi + np.sum(lxix) + llm
        )

        # gradient with spline coefficients held fixed
        d_beta = Er / s2
        d_c = Wr / s2
        d_c[:k] -= gp / tau2
        d_cx = (-(Wr[:, None] * beta[None, :]) / s2 + We / sx2).T  # (p, m)
        d_cx[:, :k] -= gxp / tau2_x[:, None]

        prior_g = -0.5 * k + 0.5 * gg / tau2
        prior_gx = -0.5 * k + 0.5 * gxgx / tau2_x
        dlogA_dxi = 2.0 * xi * xi / A
        dlogA_dlm = -1.0 / (lam_m * A)
        dlogB = 2.0 * xi_x * xi_x / B
        d_ls = -g.n + rr / s2 + 2.0 * prior_g - s2 / pr.sigma_scale**2 + 1.0
        d_lsx = -g.n + ee / sx2 + 2.0 * prior_gx - sx2 / pr.sigma_x_scale**2 + 1.0
        both = prior_g + np.sum(prior_gx)
        d_lxi = dlogA_dxi * both - xi * xi / pr.xi_scale**2 + 1.0
        d_llm = dlogA_dlm * both - lam_m * lam_m / pr.lambda_m_scale**2 + 1.0
        d_lxix = dlogB * prior_gx - xi_x * xi_x / pr.xi_x_scale**2 + 1.0

        if self.noncentered:
            # gamma = tau * z; the "+ k" in h and hx is the log-Jacobian k * log(tau)
            h = d_c[:k] @ gp + k
            hx = np.sum(d_cx[:, :k] * gxp, axis=1) + k
            d_c[:k] *= tau
            d_cx[:, :k] *= tau_x[:, None]
            lp += k * np.log(tau) + np.sum(k * np.log(tau_x))
            d_ls = d_ls + h
            d_lsx = d_lsx + hx
            half_xi = 0.5 * dlogA_dxi
            half_lm = 0.5 * dlogA_dlm
            d_lxi = d_lxi + half_xi * (h + np.sum(hx))
            d_llm = d_llm + half_lm * (h + np.sum(hx))
            d_lxix = d_lxix + 0.5 * dlogB * hx

        grad = np.empty(self.dim)
        s = self.slices
        grad[s["beta"]] = d_beta
        grad[s["c"]] = d_c
        grad[s["cx"]] = d_cx.ravel()
        grad[s["log_sigma"]] = d_ls
        grad[s["log_sigma_x"]] = d_lsx
        grad[s["log_xi"]] = d_lxi
        grad[s["log_xi_x"]] = d_lxix
        grad[s["log_lambda_m"]] = d_llm
        return float(lp), grad

    def logp(self, u):
        return self.logp_grad(u)[0]


class StandardModel:
    """Standard Bayesian spatial model ``y = X beta + V g + U g_u + eps``.

    Unconstrained layout: ``beta (p)``, ``c (k + q)``, ``log sigma``, ``log tau``.
    """

    def __init__(self, dataset, basis, prior=None, parameterization="noncentered"):
        if prior is None:
            prior = PriorConfig()
        if parameterization not in PARAMETERIZATIONS:
            raise ParameterError(f"parameterization must be one of {PARAMETERIZATIONS}")
        self.prior = prior
        self.parameterization = parameterization
        self.g = _Gram(dataset, basis)
        p, m = self.g.p, self.g.m
        self.slices = {
            "beta": slice(0, p),
            "c": slice(p, p + m),
            "log_sigma": slice(p + m, p + m + 1),
            "log_tau": slice(p + m + 1, p + m + 2),
        }
        self.dim = p + m + 2

    @property
    def noncentered(self):
        return self.parameterization == "noncentered"

    def constrain(self, u):
        s = self.slices
        k = self.g.k
        c = u[s["c"]].copy()
        tau = float(np.exp(u[s["log_tau"]][0]))
        if self.noncentered:
            c[:k] *= tau
        return StandardParams(
            beta=u[s["beta"]].copy(), gamma_pen=c[:k], gamma_unpen=c[k:],
            sigma=float(np.exp(u[s["log_sigma"]][0])), tau=tau,
        )

    def unconstrain(self, params):
        k = self.g.k
        c = np.concatenate([params.gamma_pen, params.gamma_unpen]).astype(float)
        if self.noncentered:
            c[:k] /= params.tau
        return np.concatenate([params.beta, c, [np.log(params.sigma)], [np.log(params.tau)]])

    def logp_grad(self, u):
        g = self.g
        pr = self.prior
        s = self.slices
        k = g.k
        beta = u[s["beta"]]
        c = u[s["c"]]
        ls = u[s["log_sigma"]][0]
        lt = u[s["log_tau"]][0]
        sigma = np.exp(ls)
        tau = np.exp(lt)
        if self.noncentered:
            z = c[:k]
            c = c.copy()
            c[:k] = tau * z
        s2 = sigma * sigma
        t2 = tau * tau
        Xb = g.XX @ beta
        WWc = g.WW @ c
        WXb = g.WX @ beta
        rr = g.yy - 2.0 * (beta @ g.Xy) + beta @ Xb - 2.0 * (c @ (g.Wy - WXb)) + c @ WWc
        gp = c[:k]
        gg = gp @ gp
        lp = (
            -0.5 * g.n * (LOG_2PI + 2.0 * ls) - 0.5 * rr / s2
            - 0.5 * k * (LOG_2PI + 2.0 * lt) - 0.5 * gg / t2
            + half_normal_logpdf(sigma, pr.sigma_scale)
            + half_normal_logpdf(tau, pr.tau_scale_standard_model)
            + ls + lt
        )
        d_beta = (g.Xy - Xb - g.WX.T @ c) / s2
        d_c = (g.Wy - WXb - WWc) / s2
        d_c[:k] -= gp / t2
        d_ls = -g.n + rr / s2 - s2 / pr.sigma_scale**2 + 1.0
        d_lt = -k + gg / t2 - t2 / pr.tau_scale_standard_model**2 + 1.0
        if self.noncentered:
            h = d_c[:k] @ gp + k
            d_c[:k] *= tau
            lp += k * lt
            d_lt = d_lt + h
        grad = np.empty(self.dim)
        grad[s["beta"]] = d_beta
        grad[s["c"]] = d_c
        grad[s["log_sigma"]] = d_ls
        grad[s["log_tau"]] = d_lt
        return float(lp), grad

    def logp(self, u):
        return self.logp_grad(u)[0]


def log_density_standard(params, dataset, basis, prior=None):
    """Reference (residual-based) log density of the standard spatial model."""
    if prior is None:
        prior = PriorConfig()
    r = dataset.y - dataset.X @ params.beta - basis.V @ params.gamma_pen - basis.U @ params.gamma_unpen
    return float(
        normal_logpdf_sum(r @ r, dataset.n, params.sigma**2)
        + normal_logpdf_sum(params.gamma_pen @ params.gamma_pen, basis.k, params.tau**2)
        + half_normal_logpdf(params.sigma, prior.sigma_scale)
        + half_normal_logpdf(params.tau, prior.tau_scale_standard_model)
    )


def grad_log_density_joint(params, dataset, basis, prior, parameterization="centered"):
    """Gradient of the joint log density over the unconstrained parameterization.

    Returns ``(grad, model)`` where ``model.slices`` documents the layout.
    """
    model = JointModel(dataset, basis, prior, parameterization)
    _, grad = model.logp_grad(model.unconstrain(params))
    return grad, model
