import numpy as np
import pytest

from spatialplus.basis import LocationSet, reparameterized_design
from spatialplus.data import Dataset


def random_locations(n, seed):
    rng = np.random.default_rng(seed)
    return LocationSet(rng.uniform(0.0, 1.0, size=(n, 2)))


def make_dataset(n=60, k=12, p=1, seed=0, beta=None, noise=0.1):
    """Small confounded dataset with a smooth spatial effect, already centered."""
    rng = np.random.default_rng(seed)
    locs = random_locations(n, seed + 1000)
    basis = reparameterized_design(locs, k)
    beta = np.full(p, 1.0) if beta is None else np.asarray(beta, dtype=float)
    f = basis.V @ rng.normal(0, 0.3, k) + basis.U @ rng.normal(0, 1, 2)
    X = np.column_stack([
        0.5 * f + basis.V @ rng.normal(0, 0.3, k) + 0.3 * rng.standard_normal(n) for _ in range(p)
    ])
    y = X @ beta + f + noise * rng.standard_normal(n)
    return Dataset(y=y, X=X, locations=locs, beta_true=beta).centered(), basis


@pytest.fixture
def small_problem():
    return make_dataset()
