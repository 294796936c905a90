"""Convergence diagnostics for multi-chain draws of shape ``(chains, draws)``."""

from __future__ import annotations

import numpy as np
from scipy import stats

from ..errors import ParameterError

NOT_APPLICABLE = None


def _as_chains(x):
    x = np.asarray(x, dtype=float)
    if x.ndim != 2:
        raise ParameterError(f"expected draws of shape (chains, draws), got {x.shape}")
    return x


def rank_normalize(x):
    """Normal scores of the pooled ranks (average ranks for ties)."""
    x = _as_chains(x)
    size = x.size
    ranks = stats.rankdata(x, method="average").reshape(x.shape)
    return stats.norm.ppf((ranks - 0.375) / (size + 0.25))


def split_chains(x):
    x = _as_chains(x)
    half = x.shape[1] // 2
    # odd lengths drop the middle draw
    return np.vstack([x[:, :half], x[:, x.shape[1] - half:]])


def _rhat_core(x):
    m, n = x.shape
    chain_means = x.mean(axis=1)
    B = n * chain_means.var(ddof=1)
    W = x.var(axis=1, ddof=1).mean()
    var_hat = (n - 1) / n * W + B / n
    return float(np.sqrt(var_hat / W))


def split_rhat(x, rank=True):
    """Rank-normalized split R-hat for one scalar quantity.

    With ``rank=False`` the classic split R-hat on the raw draws is returned;
    it is unbounded, whereas the rank-normalized value saturates near 1.83
    for two chains with disjoint supports. Returns ``NOT_APPLICABLE``
    (``None``) when the quantity is constant.
    """
    x = _as_chains(x)
    if x.shape[0] < 2 or x.shape[1] < 4:
        raise ParameterError("split R-hat needs at least 2 chains of 4 draws")
    if not np.all(np.isfinite(x)) or np.ptp(x) == 0:
        return NOT_APPLICABLE
    z = split_chains(rank_normalize(x) if rank else x)
    if np.any(z.var(axis=1, ddof=1) == 0):
        return NOT_APPLICABLE
    return _rhat_core(z)


def _autocov(x):
    n = x.shape[-1]
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, size, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), size, axis=-1)[..., :n]
    return acov / n


def ess(x):
    """Bulk effective sample size (rank-normalized split chains, Geyer truncation)."""
    x = _as_chains(x)
    if np.ptp(x) == 0:
        return NOT_APPLICABLE
    z = split_chains(rank_normalize(x))
    return _ess_raw(z)


def ess_mean(x):
    """Effective sample size for the mean on the original scale (split chains)."""
    x = _as_chains(x)
    if np.ptp(x) == 0:
        return NOT_APPLICABLE
    return _ess_raw(split_chains(x))


def _ess_raw(z):
    m, n = z.shape
    acov = _autocov(z)
    chain_var = acov[:, 0] * n / (n - 1.0)
    W = chain_var.mean()
    mean_var = W * (n - 1.0) / n
    if m > 1:
        mean_var += z.mean(axis=1).var(ddof=1)
    rho = 1.0 - (W - acov.mean(axis=0)) / mean_var
    rho[0] = 1.0
    # Geyer initial positive sequence on pairs, then monotone
    t = 0
    pair_sums = []
    while t + 1 < n:
        s = rho[t] + rho[t + 1]
        if s < 0:
            break
        pair_sums.append(s)
        t += 2
    pair_sums = np.minimum.accumulate(np.asarray(pair_sums)) if pair_sums else np.array([1.0])
    tau = -1.0 + 2.0 * pair_sums.sum()
    tau = max(tau, 1.0 / np.log10(m * n))
    return float(m * n / tau)


def mcse_mean(x):
    """Monte-Carlo standard error of the posterior mean."""
    x = _as_chains(x)
    e = ess_mean(x)
    if e is None:
        return 0.0
    return float(x.std(ddof=1) / np.sqrt(e))
