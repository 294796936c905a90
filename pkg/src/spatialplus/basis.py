"""Low-rank thin-plate regression spline design.

The thin-plate kernel matrix is projected onto the orthogonal complement of
the affine trend space, eigendecomposed, and truncated to the ``k`` leading
eigen-directions. The result is split into a penalized block ``V`` whose
coefficients carry an i.i.d. Gaussian prior (identity penalty) and an
unpenalized block ``U`` spanning the centered linear trend.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConstructionError, ParameterError, RankError

# eigenvalues below this fraction of the largest are treated as zero
EIGEN_RTOL = 1e-10


def _readonly(a):
    a = np.array(a, dtype=float, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class LocationSet:
    """Planar observation locations, one row per site."""

    coords: np.ndarray

    def __post_init__(self):
        coords = np.asarray(self.coords, dtype=float)
        if coords.ndim != 2 or coords.shape[1] != 2:
            raise ParameterError(f"coords must have shape (n, 2), got {coords.shape}")
        if coords.shape[0] < 4:
            raise ParameterError(f"need at least 4 locations, got {coords.shape[0]}")
        if not np.all(np.isfinite(coords)):
            raise ConstructionError("coordinates contain non-finite values")
        dup = _first_duplicate(coords)
        if dup is not None:
            raise ConstructionError(
                f"duplicate locations at indices {dup[0]} and {dup[1]}"
            )
        object.__setattr__(self, "coords", _readonly(coords))

    @property
    def n(self):
        return self.coords.shape[0]

    def __len__(self):
        return self.n


def _first_duplicate(coords):
    _, first, inverse, counts = np.unique(
        coords, axis=0, return_index=True, return_inverse=True, return_counts=True
    )
    inverse = np.ravel(inverse)
    if np.all(counts == 1):
        return None
    for i, group in enumerate(inverse):
        if counts[group] > 1 and first[group] != i:
            return int(first[group]), int(i)
    return None  # pragma: no cover


@dataclass(frozen=True, eq=False)
class BasisFactor:
    """Reparameterized spline design shared by response and covariates.

    Attributes
    ----------
    V : ndarray, shape (n, k)
        Penalized design; ``V.T @ V == diag(eigenvalues)``.
    U : ndarray, shape (n, 2)
        Centered coordinate columns (unpenalized null space).
    eigenvalues : ndarray, shape (k,)
        Retained positive eigenvalues, non-increasing.
    locations : LocationSet
    """

    V: np.ndarray
    U: np.ndarray
    eigenvalues: np.ndarray
    locations: LocationSet

    @property
    def k(self):
        return self.V.shape[1]

    @property
    def q(self):
        return self.U.shape[1]

    @property
    def n(self):
        return self.V.shape[0]


def tps_kernel(h):
    """Thin-plate radial function ``h**2 * log(h)`` with value 0 at ``h = 0``.

    Accepts scalars or arrays; negative distances raise ``ParameterError``.
    """
    arr = np.asarray(h, dtype=float)
    if np.any(arr < 0) or np.any(np.isnan(arr)):
        raise ParameterError("tps_kernel is defined for non-negative distances only")
    safe = np.where(arr > 0, arr, 1.0)
    out = np.where(arr > 0, safe * safe * np.log(safe), 0.0)
    if np.ndim(h) == 0:
        return float(out)
    return out


def pairwise_distances(coords):
    diff = coords[:, None, :] - coords[None, :, :]
    return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))


def build_kernel_matrix(locs):
    """Thin-plate kernel evaluated at all pairs of locations."""
    if not isinstance(locs, LocationSet):
        locs = LocationSet(locs)
    E = tps_kernel(pairwise_distances(locs.coords))
    # distance is symmetric up to rounding in the subtraction order
    E = 0.5 * (E + E.T)
    np.fill_diagonal(E, 0.0)
    return E


def affine_trend(coords):
    n = coords.shape[0]
    return np.column_stack([np.ones(n), coords])


def projected_kernel(locs):
    """Return ``P E P`` with ``P`` the projector orthogonal to the affine trend."""
    E = build_kernel_matrix(locs)
    Q, _ = np.linalg.qr(affine_trend(locs.coords))
    PE = E - Q @ (Q.T @ E)
    PEP = PE - (PE @ Q) @ Q.T
    return 0.5 * (PEP + PEP.T)


def _spectrum(locs):
    w, G = np.linalg.eigh(projected_kernel(locs))
    order = np.argsort(-w, kind="stable")
    return w[order], G[:, order]


def positive_rank(eigenvalues):
    top = eigenvalues[0]
    if top <= 0:
        return 0
    return int(np.sum(eigenvalues > EIGEN_RTOL * top))


def reparameterized_design(locs, k):
    """Build the penalized/unpenalized spline design with ``k`` basis functions.

    Parameters
    ----------
    locs : LocationSet or array_like, shape (n, 2)
    k : int
        Number of retained eigen-directions, ``1 <= k <= n - 3``.

    Returns
    -------
    BasisFactor
    """
    if not isinstance(locs, LocationSet):
        locs = LocationSet(locs)
    n = locs.n
    if isinstance(k, bool) or int(k) != k:
        raise ParameterError(f"k must be an integer, got {k!r}")
    k = int(k)
    if k < 1 or k > n - 3:
        raise ParameterError(f"k must lie in [1, n - 3] = [1, {n - 3}], got {k}")
    w, G = _spectrum(locs)
    available = positive_rank(w)
    if available < k:
        raise RankError(
            f"requested k = {k} but only {available} positive eigenvalues are available",
            requested=k,
            available=available,
        )
    w_k = w[:k]
    V = G[:, :k] * np.sqrt(w_k)
    U = locs.coords - locs.coords.mean(axis=0)
    return BasisFactor(V=_readonly(V), U=_readonly(U), eigenvalues=_readonly(w_k), locations=locs)


def max_rank(locs):
    """Largest admissible ``k`` for these locations."""
    if not isinstance(locs, LocationSet):
        locs = LocationSet(locs)
    w, _ = _spectrum(locs)
    return min(positive_rank(w), locs.n - 3)


def evaluate_effect(basis, gamma_pen, gamma_unpen):
    """Spatial effect ``V @ gamma_pen + U @ gamma_unpen``."""
    gamma_pen = np.asarray(gamma_pen, dtype=float)
    gamma_unpen = np.asarray(gamma_unpen, dtype=float)
    if gamma_pen.shape != (basis.k,):
        raise ParameterError(f"gamma_pen must have shape ({basis.k},), got {gamma_pen.shape}")
    if gamma_unpen.shape != (basis.q,):
        raise ParameterError(
            f"gamma_unpen must have shape ({basis.q},), got {gamma_unpen.shape}"
        )
    return basis.V @ gamma_pen + basis.U @ gamma_unpen
