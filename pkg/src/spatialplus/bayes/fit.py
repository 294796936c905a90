"""Bayesian spatial and spatial+ fits and their posterior summaries."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..errors import DataError, ParameterError
from .diagnostics import mcse_mean, split_rhat
from .model import JointModel, PriorConfig, StandardModel
from .nuts import MCMCConfig, sample_posterior

log = logging.getLogger(__name__)

RHAT_FLAG = 1.05
CONSTRAINT_RTOL = 1e-12
DEFAULT_PARAMETERIZATION = "centered"

_JOINT_FIELDS = ("beta", "gamma_pen", "gamma_unpen", "gamma_x_pen", "gamma_x_unpen",
                 "sigma", "sigma_x", "xi", "xi_x", "lambda_m")
_STANDARD_FIELDS = ("beta", "gamma_pen", "gamma_unpen", "sigma", "tau")


@dataclass(eq=False)
class PosteriorDraws:
    """Post-warmup draws on the constrained scale.

    ``samples[name]`` has shape ``(chains, draws, *param_shape)``. Derived
    smoothing quantities are recomputed from the primitives on access.
    """

    kind: str
    samples: dict
    warmup_discarded: int
    seed: int
    config: MCMCConfig
    prior: PriorConfig
    parameterization: str
    sampler_stats: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)

    @property
    def n_chains(self):
        return self.samples["beta"].shape[0]

    @property
    def n_draws(self):
        return self.samples["beta"].shape[1]

    @property
    def p(self):
        return self.samples["beta"].shape[2]

    # derived quantities -------------------------------------------------
    @property
    def tau2(self):
        s = self.samples
        if self.kind == "standard":
            return s["tau"] ** 2
        return s["sigma"] ** 2 * (1.0 / s["lambda_m"] + s["xi"] ** 2)

    @property
    def tau2_x(self):
        if self.kind != "joint":
            raise AttributeError("tau2_x exists only for the joint model")
        s = self.samples
        ratio = s["sigma_x"] ** 2 / (s["sigma"] ** 2)[..., None]
        return self.tau2[..., None] * ratio * (1.0 + s["xi_x"] ** 2)

    @property
    def lam(self):
        return self.samples["sigma"] ** 2 / self.tau2

    @property
    def lam_x(self):
        return self.samples["sigma_x"] ** 2 / self.tau2_x

    # summaries ----------------------------------------------------------
    def beta_summary(self):
        b = self.samples["beta"]
        flat = b.reshape(-1, b.shape[-1])
        lo, hi = np.quantile(flat, [0.025, 0.975], axis=0)
        return {
            "mean": flat.mean(axis=0),
            "sd": flat.std(axis=0, ddof=1),
            "ci_low": lo,
            "ci_high": hi,
            "rhat": np.array([_nan_if_none(split_rhat(b[:, :, j])) for j in range(b.shape[-1])]),
            "mcse": np.array([mcse_mean(b[:, :, j]) for j in range(b.shape[-1])]),
        }

    def scalar_columns(self):
        """Ordered ``name -> (chains, draws)`` arrays for every scalar, derived included."""
        cols = {}
        fields_ = _JOINT_FIELDS if self.kind == "joint" else _STANDARD_FIELDS
        for name in fields_:
            arr = self.samples[name]
            if arr.ndim == 2:
                cols[name] = arr
            elif arr.ndim == 3:
                for j in range(arr.shape[2]):
                    cols[f"{name}_{j + 1}"] = arr[:, :, j]
            else:
                for a in range(arr.shape[2]):
                    for j in range(arr.shape[3]):
                        cols[f"{name}_{a + 1}_{j + 1}"] = arr[:, :, a, j]
        cols["tau2"] = self.tau2
        if self.kind == "joint":
            t2x = self.tau2_x
            for j in range(t2x.shape[2]):
                cols[f"tau2_x_{j + 1}"] = t2x[:, :, j]
        cols["lambda"] = self.lam
        if self.kind == "joint":
            lx = self.lam_x
            for j in range(lx.shape[2]):
                cols[f"lambda_x_{j + 1}"] = lx[:, :, j]
        return cols

    def rhat_table(self):
        return {name: split_rhat(arr) for name, arr in self.scalar_columns().items()}


def _nan_if_none(v):
    return np.nan if v is None else v


def _collect(model, run, fields_):
    draws = run.draws  # (chains, draws, dim)
    c, d, _ = draws.shape
    first = model.constrain(draws[0, 0])
    out = {}
    for name in fields_:
        v = np.asarray(getattr(first, name), dtype=float)
        out[name] = np.empty((c, d) + v.shape)
    for i in range(c):
        for j in range(d):
            prm = model.constrain(draws[i, j])
            for name in fields_:
                out[name][i, j] = getattr(prm, name)
    return out


def _check_dataset(dataset):
    if not dataset.is_centered:
        raise DataError("Bayesian fits require a centered dataset; call dataset.centered()")


def fit_standard_spatial_bayes(dataset, basis, seed, mcmc=None, prior=None,
                               parameterization=DEFAULT_PARAMETERIZATION):
    """Posterior of ``y = X beta + V g + U g_u + eps`` with half-normal scale priors."""
    _check_dataset(dataset)
    if mcmc is None:
        mcmc = MCMCConfig()
    if prior is None:
        prior = PriorConfig()
    model = StandardModel(dataset, basis, prior, parameterization)
    run = sample_posterior(model, mcmc, seed)
    draws = PosteriorDraws(
        kind="standard", samples=_collect(model, run, _STANDARD_FIELDS),
        warmup_discarded=mcmc.warmup, seed=int(seed), config=mcmc, prior=prior,
        parameterization=parameterization, sampler_stats=run.stats,
    )
    _flag_rhat(draws)
    return draws


def fit_lambda_m_prior(lambda_draws):
    """Half-normal scale closest (forward KL, i.e. maximum likelihood) to the draws."""
    d = np.asarray(lambda_draws, dtype=float).ravel()
    if d.size < 100:
        raise DataError(f"need at least 100 draws to fit the lambda_m prior, got {d.size}")
    if not np.all(np.isfinite(d)):
        raise DataError("lambda draws contain non-finite values")
    if np.any(d <= 0):
        raise DataError("lambda draws must be strictly positive")
    return float(np.sqrt(np.mean(d * d)))


def check_prior_constraints(draws, rtol=CONSTRAINT_RTOL):
    """Verify ``lambda_x < lambda < lambda_m`` on every draw; returns True or raises."""
    lam = draws.lam
    lam_m = draws.samples["lambda_m"]
    lam_x = draws.lam_x
    upper_ok = lam <= lam_m * (1.0 + rtol)
    lower_ok = lam_x <= lam[..., None] * (1.0 + rtol)
    if not (np.all(upper_ok) and np.all(lower_ok)):
        bad = int(np.sum(~upper_ok) + np.sum(~lower_ok))
        raise AssertionError(f"smoothing-order constraint violated on {bad} draws")
    return True


def _flag_rhat(draws):
    rh = draws.beta_summary()["rhat"]
    for j, r in enumerate(rh):
        if np.isfinite(r) and r > RHAT_FLAG:
            draws.flags.append(f"rhat(beta_{j + 1})={r:.3f}>{RHAT_FLAG}")
    if draws.flags:
        log.warning("convergence flags: %s", "; ".join(draws.flags))


def fit_spatial_plus_bayes(dataset, basis, prior, seed, mcmc=None,
                           parameterization=DEFAULT_PARAMETERIZATION):
    """Posterior of the joint spatial+ model; ``prior.lambda_m_scale`` must be set."""
    _check_dataset(dataset)
    if prior.lambda_m_scale is None:
        raise ParameterError("prior.lambda_m_scale is unset; fit the standard model first")
    if mcmc is None:
        mcmc = MCMCConfig()
    model = JointModel(dataset, basis, prior, parameterization)
    run = sample_posterior(model, mcmc, seed)
    draws = PosteriorDraws(
        kind="joint", samples=_collect(model, run, _JOINT_FIELDS),
        warmup_discarded=mcmc.warmup, seed=int(seed), config=mcmc, prior=prior,
        parameterization=parameterization, sampler_stats=run.stats,
    )
    check_prior_constraints(draws)
    _flag_rhat(draws)
    return draws


@dataclass(eq=False)
class TwoPassResult:
    standard: PosteriorDraws
    phi_hat: float
    plus: PosteriorDraws


def fit_bayes_two_pass(dataset, basis, seed, prior=None, mcmc=None, standard_mcmc=None,
                       parameterization=DEFAULT_PARAMETERIZATION):
    """Standard model, then its smoothing posterior as the lambda_m prior, then spatial+."""
    if prior is None:
        prior = PriorConfig()
    std = fit_standard_spatial_bayes(dataset, basis, seed, mcmc=standard_mcmc or mcmc,
                                     prior=prior, parameterization=parameterization)
    phi = fit_lambda_m_prior(std.lam)
    plus = fit_spatial_plus_bayes(dataset, basis, prior.with_lambda_m_scale(phi), seed + 1,
                                  mcmc=mcmc, parameterization=parameterization)
    return TwoPassResult(standard=std, phi_hat=phi, plus=plus)


def check_less_smoothing(tau2, tau2_x, beta, k, n_draws, seed, sigma2=1.0):
    """Monte-Carlo check of the variance of ``gamma_pen - beta * gamma_x_pen``.

    Returns a dict with per-coordinate sample variances, the analytic
    variance ``tau2 + beta**2 * tau2_x`` and the implied smoothing levels.
    """
    if not (tau2 > 0 and tau2_x > 0):
        raise ParameterError("tau2 and tau2_x must be positive")
    if not sigma2 > 0:
        raise ParameterError("sigma2 must be positive")
    k = int(getattr(k, "k", k))
    rng = np.random.default_rng(int(seed))
    g = rng.standard_normal((n_draws, k)) * np.sqrt(tau2)
    gx = rng.standard_normal((n_draws, k)) * np.sqrt(tau2_x)
    combined = g - beta * gx
    target = tau2 + beta**2 * tau2_x
    return {
        "sample_variance": combined.var(axis=0, ddof=1),
        "target_variance": target,
        "lambda_standard": sigma2 / tau2,
        "lambda_tilde": sigma2 / target,
    }
