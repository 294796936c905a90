from types import SimpleNamespace

import numpy as np
import pytest

from spatialplus.basis import reparameterized_design
from spatialplus.bayes.diagnostics import mcse_mean
from spatialplus.bayes.fit import (
    PosteriorDraws,
    check_prior_constraints,
    check_less_smoothing,
    fit_bayes_two_pass,
    fit_lambda_m_prior,
    fit_spatial_plus_bayes,
    fit_standard_spatial_bayes,
    _flag_rhat,
)
from spatialplus.bayes.model import PriorConfig
from spatialplus.bayes.nuts import MCMCConfig
from spatialplus.data import Dataset
from spatialplus.errors import DataError, ParameterError
from spatialplus.fieldgen import generate, replicate_seed

from conftest import make_dataset, random_locations

SHORT = MCMCConfig(chains=2, warmup=300, draws=400)


def _orthogonal_problem(n=60, k=8, seed=0):
    rng = np.random.default_rng(seed)
    locs = random_locations(n, seed)
    basis = reparameterized_design(locs, k)
    Q, _ = np.linalg.qr(np.column_stack([np.ones(n), basis.U, basis.V]))
    x = rng.standard_normal(n)
    x -= Q @ (Q.T @ x)
    e = 0.05 * rng.standard_normal(n)
    e -= Q @ (Q.T @ e)
    e -= x * (x @ e) / (x @ x)
    y = 2.0 * x + e + basis.V @ rng.normal(0, 0.3, k)
    return Dataset(y=y, X=x[:, None], locations=locs).centered(), basis


@pytest.fixture(scope="module")
def orthogonal_fit():
    ds, basis = _orthogonal_problem()
    return fit_standard_spatial_bayes(ds, basis, seed=1, mcmc=SHORT)


def test_orthogonal_covariate_recovers_coefficient(orthogonal_fit):
    b = orthogonal_fit.samples["beta"][:, :, 0]
    assert abs(b.mean() - 2.0) < 3 * mcse_mean(b)


def test_standard_draw_shapes_and_summary(orthogonal_fit):
    d = orthogonal_fit
    assert d.kind == "standard" and d.n_chains == 2 and d.n_draws == 400 and d.p == 1
    assert d.samples["gamma_pen"].shape == (2, 400, 8)
    s = d.beta_summary()
    assert s["ci_low"][0] < s["mean"][0] < s["ci_high"][0]
    assert np.allclose(d.lam, d.samples["sigma"] ** 2 / d.samples["tau"] ** 2)
    assert "lambda" in d.scalar_columns() and "tau2" in d.scalar_columns()


def test_pure_noise_response_smooths_heavily():
    n, k = 80, 10
    locs = random_locations(n, 3)
    basis = reparameterized_design(locs, k)
    rng = np.random.default_rng(3)
    ds = Dataset(y=rng.standard_normal(n), X=rng.standard_normal((n, 1)), locations=locs).centered()
    post = fit_standard_spatial_bayes(ds, basis, seed=2, mcmc=SHORT)
    prior = PriorConfig()
    prior_lam = (prior.sigma_scale * np.abs(rng.standard_normal(200_000))) ** 2 / (
        prior.tau_scale_standard_model * np.abs(rng.standard_normal(200_000))) ** 2
    assert np.median(post.lam) > np.median(prior_lam)


def test_uncentered_data_rejected():
    ds, basis = make_dataset(n=30, k=5)
    raw = Dataset(y=ds.y + 1.0, X=ds.X, locations=ds.locations)
    with pytest.raises(DataError, match="centered"):
        fit_standard_spatial_bayes(raw, basis, seed=0, mcmc=SHORT)


def test_joint_fit_requires_lambda_m_scale():
    ds, basis = make_dataset(n=30, k=5)
    with pytest.raises(ParameterError, match="lambda_m_scale"):
        fit_spatial_plus_bayes(ds, basis, PriorConfig(), seed=0, mcmc=SHORT)


@pytest.fixture(scope="module")
def two_pass():
    ds, basis = make_dataset(n=60, k=8, p=2, seed=4)
    return fit_bayes_two_pass(ds, basis, seed=7, mcmc=SHORT)


def test_two_pass_links_phi_hat(two_pass):
    assert two_pass.phi_hat == fit_lambda_m_prior(two_pass.standard.lam)
    assert two_pass.plus.prior.lambda_m_scale == two_pass.phi_hat
    assert two_pass.standard.seed == 7 and two_pass.plus.seed == 8


def test_every_joint_draw_respects_smoothing_order(two_pass):
    d = two_pass.plus
    assert check_prior_constraints(d)
    lam, lam_m, lam_x = d.lam, d.samples["lambda_m"], d.lam_x
    assert np.all(lam < lam_m * (1 + 1e-12))
    assert np.all(lam_x < lam[..., None] * (1 + 1e-12))
    assert lam_x.shape == (2, 400, 2)


def test_joint_columns_cover_derived_quantities(two_pass):
    cols = two_pass.plus.scalar_columns()
    for name in ("beta_1", "beta_2", "gamma_x_pen_2_8", "tau2", "tau2_x_2", "lambda",
                 "lambda_x_1", "lambda_m", "xi_x_2"):
        assert name in cols


def test_constraint_violation_detected(two_pass):
    # the order holds by construction, so a violation needs hand-made draws
    d = two_pass.plus
    lam_m = d.samples["lambda_m"].copy()
    lam_m[0, 0] = d.lam[0, 0] * 0.5
    fake = SimpleNamespace(lam=d.lam, lam_x=d.lam_x, samples={"lambda_m": lam_m})
    with pytest.raises(AssertionError, match="1 draws"):
        check_prior_constraints(fake)


def test_rhat_breach_is_flagged_not_raised():
    rng = np.random.default_rng(0)
    beta = np.stack([rng.normal(0, 1, (300, 1)), rng.normal(5, 1, (300, 1))])
    fake = PosteriorDraws(kind="standard", samples={"beta": beta}, warmup_discarded=0,
                          seed=0, config=SHORT, prior=PriorConfig(), parameterization="centered")
    _flag_rhat(fake)
    assert len(fake.flags) == 1 and fake.flags[0].startswith("rhat(beta_1)")


@pytest.mark.slow
def test_scenario3_beta_converges():
    n = 300
    ds = generate("uni", 3, n, replicate_seed(0, 0), fit_basis=150)
    basis = reparameterized_design(ds.locations, 150)
    post = fit_standard_spatial_bayes(ds, basis, seed=replicate_seed(0, 0))
    assert post.beta_summary()["rhat"][0] < 1.01


# lambda_m prior fit --------------------------------------------------------------

def test_phi_constant_draws():
    assert fit_lambda_m_prior(np.full(100, 0.3)) == pytest.approx(0.3, rel=1e-15)


def test_phi_two_values():
    assert fit_lambda_m_prior(np.tile([3.0, 4.0], 50)) == pytest.approx(3.5355339, abs=1e-6)


def test_phi_half_normal_draws():
    d = np.abs(np.random.default_rng(0).normal(0, 2.0, 100_000))
    assert fit_lambda_m_prior(d) == pytest.approx(2.0, rel=0.01)


@pytest.mark.parametrize("draws", [np.full(99, 1.0), np.r_[np.ones(99), 0.0],
                                   np.r_[np.ones(99), -1.0], np.r_[np.ones(99), np.nan]])
def test_phi_rejects_bad_draws(draws):
    with pytest.raises(DataError):
        fit_lambda_m_prior(draws)


# less smoothing ----------------------------------------------------------------

def test_less_smoothing_zero_beta():
    r = check_less_smoothing(2.5, 7.0, 0.0, 10, 1000, seed=0)
    assert r["target_variance"] == 2.5
    assert r["lambda_tilde"] == r["lambda_standard"]


def test_less_smoothing_monte_carlo():
    r = check_less_smoothing(1.0, 1.0, 2.0, 20, 100_000, seed=1)
    assert r["target_variance"] == 5.0
    assert np.all(np.abs(r["sample_variance"] / 5.0 - 1) < 0.05)


@pytest.mark.parametrize("beta", [-3.0, -1e-3, 0.5, 10.0])
def test_less_smoothing_less_smoothing(beta):
    r = check_less_smoothing(0.7, 0.2, beta, 3, 200, seed=2, sigma2=1.3)
    assert r["lambda_tilde"] < r["lambda_standard"]


def test_less_smoothing_accepts_basis_and_validates():
    _, basis = make_dataset(n=20, k=4)
    assert check_less_smoothing(1, 1, 1, basis, 200, 0)["sample_variance"].shape == (4,)
    with pytest.raises(ParameterError):
        check_less_smoothing(0.0, 1.0, 1.0, 3, 10, 0)
