"""Gaussian-process fields and confounded simulation scenarios.

Every generator is a pure function of its integer seed. Sub-streams are
derived with :class:`numpy.random.SeedSequence` so adding a draw to one
stream never shifts another.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy import linalg

from .basis import LocationSet, max_rank, pairwise_distances, reparameterized_design
from .data import ScenarioData
from .errors import CapacityError, NumericError, ParameterError
from .frequentist import fit_pls, reml_select_lambda

log = logging.getLogger(__name__)

GP_RANGE = 0.3
GP_VARIANCE = 1.0
NOISE_SD = 0.1
JITTER = 1e-8

_MASK64 = (1 << 64) - 1

# basis caps for the high/low frequency projections
UNI_CAPS = (510, 10)
BI_CAPS = (520, 20)
# margin of the high-frequency cap over the fitting basis (510 - 500, 520 - 500)
UNI_MARGIN = 10
BI_MARGIN = 20

# stream labels; fixed so every scenario id consumes identical randomness
_STREAMS = ("locations", "gp1", "gp2", "eps_x1", "eps_x2", "eps_y")


@dataclass(frozen=True)
class GpConfig:
    range: float = GP_RANGE
    marginal_variance: float = GP_VARIANCE
    seed: int = 0

    def __post_init__(self):
        if not self.range > 0:
            raise ParameterError(f"range must be positive, got {self.range}")
        if not self.marginal_variance > 0:
            raise ParameterError(
                f"marginal_variance must be positive, got {self.marginal_variance}"
            )


def mix64(x):
    """SplitMix64 finalizer: a bijective scramble of a 64-bit integer."""
    z = (int(x) + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def replicate_seed(root_seed, index):
    """Seed for replicate ``index``; depends only on ``(root_seed, index)``."""
    return mix64((int(root_seed) + int(index)) & _MASK64)


def _stream(seed, name):
    return np.random.default_rng([int(seed) & _MASK64, _STREAMS.index(name)])


def default_grid_side(n):
    return max(60, math.ceil(math.sqrt(2 * n)))


def sample_grid_locations(n, grid_side=None, seed=0, rng=None):
    """Sample ``n`` distinct points of a ``grid_side x grid_side`` lattice on [0, 1]^2."""
    if grid_side is None:
        grid_side = default_grid_side(n)
    if n > grid_side * grid_side:
        raise CapacityError(
            f"cannot sample {n} distinct cells from a {grid_side}x{grid_side} grid"
        )
    if rng is None:
        rng = np.random.default_rng(int(seed) & _MASK64)
    ticks = np.linspace(0.0, 1.0, grid_side)
    cells = rng.choice(grid_side * grid_side, size=n, replace=False)
    coords = np.column_stack([ticks[cells // grid_side], ticks[cells % grid_side]])
    return LocationSet(coords)


def exponential_covariance(locs, cfg):
    h = pairwise_distances(locs.coords)
    return cfg.marginal_variance * np.exp(-h / cfg.range)


def sample_gp(locs, cfg, rng=None):
    """One realization of a zero-mean GP with exponential covariance."""
    C = exponential_covariance(locs, cfg)
    C[np.diag_indices_from(C)] += JITTER
    try:
        L = linalg.cholesky(C, lower=True)
    except linalg.LinAlgError as exc:
        raise NumericError("covariance matrix is not positive definite after jitter",
                           term="gp_cholesky") from exc
    if rng is None:
        rng = np.random.default_rng(int(cfg.seed) & _MASK64)
    return L @ rng.standard_normal(locs.n)


def clamp_basis_size(k, locs, label=""):
    limit = max_rank(locs)
    if k > limit:
        msg = f"basis size {k} exceeds the admissible maximum {limit} for n = {locs.n}; clamped"
        if label:
            msg = f"{label}: {msg}"
        warnings.warn(msg, stacklevel=3)
        log.info(msg)
        return limit
    return k


def frequency_project(field, locs, k, lam=None, criterion="reml"):
    """Fitted values of a penalized spline fit of ``field`` with ``k`` basis functions.

    ``lam=None`` selects the smoothing parameter by ``criterion``;
    a number fixes it (``lam=0`` gives the least-squares projection).
    """
    if not isinstance(locs, LocationSet):
        locs = LocationSet(locs)
    basis = reparameterized_design(locs, k)
    field = np.asarray(field, dtype=float)
    # the basis spans only centered functions; the mean is restored afterwards
    mean = field.mean()
    if lam is None:
        _, fit = reml_select_lambda(field - mean, None, basis, criterion=criterion)
    else:
        fit = fit_pls(field - mean, None, basis, lam)
    return fit.fitted + mean


def _caps(caps, margin, fit_basis):
    if fit_basis is None:
        return caps
    fit_basis = int(fit_basis)
    if fit_basis < 1:
        raise ParameterError(f"fit_basis must be positive, got {fit_basis}")
    return (fit_basis + margin, caps[1])


def base_fields(n, seed, caps, grid_side=None):
    """Locations and the projected fields ``z_high``, ``z_low``, ``z_high2`` of one seed."""
    locs = sample_grid_locations(n, grid_side, rng=_stream(seed, "locations"))
    cfg = GpConfig(GP_RANGE, GP_VARIANCE, seed)
    k_high = clamp_basis_size(caps[0], locs, "high-frequency projection")
    k_low = clamp_basis_size(caps[1], locs, "low-frequency projection")
    g1 = sample_gp(locs, cfg, rng=_stream(seed, "gp1"))
    g2 = sample_gp(locs, cfg, rng=_stream(seed, "gp2"))
    fields = {
        "z_high": frequency_project(g1, locs, k_high),
        "z_low": frequency_project(g1, locs, k_low),
        "z_high2": frequency_project(g2, locs, k_high),
    }
    return locs, fields


def gen_scenario_uni(scenario_id, n, seed, grid_side=None, fit_basis=None):
    """One-covariate confounding scenario (ids 1, 2, 3) with ``beta_true = 1``.

    The high-frequency confounder is a projection on 510 basis
    functions, clamped to ``n - 3``. Passing ``fit_basis`` instead sets that
    cap to ``fit_basis + 10``, preserving the small margin between
    the confounder and the fitting basis when the fitting basis is scaled
    down.
    """
    scenario_id = int(scenario_id)
    if scenario_id not in (1, 2, 3):
        raise ParameterError(f"scenario id must be one of {{1, 2, 3}}, got {scenario_id}")
    if n < 50:
        raise ParameterError(f"n must be at least 50, got {n}")
    locs, f = base_fields(n, seed, _caps(UNI_CAPS, UNI_MARGIN, fit_basis), grid_side)
    if scenario_id == 3:
        z = 0.8 * f["z_low"] + 0.2 * f["z_high2"]
    else:
        z = f["z_high"]
    sigma_x = 0.2 if scenario_id == 2 else 0.1
    x = z + sigma_x * _stream(seed, "eps_x1").standard_normal(n)
    y = x + f["z_high"] + f["z_low"] + NOISE_SD * _stream(seed, "eps_y").standard_normal(n)
    ds = ScenarioData(
        y=y,
        X=x[:, None],
        locations=locs,
        beta_true=np.array([1.0]),
        scenario_id=f"uni-{scenario_id}",
        seed=int(seed),
    )
    return ds.centered()


def gen_scenario_bi(scenario_id, n, seed, grid_side=None, fit_basis=None):
    """Two-covariate scenario (ids 1, 2, 3) with ``beta_true = (0.5, 0.5)``.

    The high-frequency confounder is a projection on 520 basis
    functions, clamped to ``n - 3``. Passing ``fit_basis`` instead sets that
    cap to ``fit_basis + 20``, preserving the small margin between
    the confounder and the fitting basis when the fitting basis is scaled
    down.
    """
    scenario_id = int(scenario_id)
    if scenario_id not in (1, 2, 3):
        raise ParameterError(f"scenario id must be one of {{1, 2, 3}}, got {scenario_id}")
    if n < 50:
        raise ParameterError(f"n must be at least 50, got {n}")
    locs, f = base_fields(n, seed, _caps(BI_CAPS, BI_MARGIN, fit_basis), grid_side)
    zh, zl, zh2 = f["z_high"], f["z_low"], f["z_high2"]
    if scenario_id == 1:
        z = 0.8 * zh + 0.2 * zh2
    elif scenario_id == 2:
        z = 0.2 * zh + 0.8 * zh2
    else:
        z = 0.1 * zh + 0.7 * zl + 0.2 * zh2
    x1 = 0.5 * zh + 0.5 * zh2 + NOISE_SD * _stream(seed, "eps_x1").standard_normal(n)
    x2 = z + NOISE_SD * _stream(seed, "eps_x2").standard_normal(n)
    y = 0.5 * x1 + 0.5 * x2 + zh + zl + NOISE_SD * _stream(seed, "eps_y").standard_normal(n)
    ds = ScenarioData(
        y=y,
        X=np.column_stack([x1, x2]),
        locations=locs,
        beta_true=np.array([0.5, 0.5]),
        scenario_id=f"bi-{scenario_id}",
        seed=int(seed),
    )
    return ds.centered()


def generate(family, scenario_id, n, seed, grid_side=None, fit_basis=None):
    if family == "uni":
        return gen_scenario_uni(scenario_id, n, seed, grid_side, fit_basis)
    if family == "bi":
        return gen_scenario_bi(scenario_id, n, seed, grid_side, fit_basis)
    raise ParameterError(f"family must be 'uni' or 'bi', got {family!r}")
