"""Subspace basis for the inducing inputs.

The basis ``x_tilde`` (R x D) holds the top-R right singular vectors of the
design matrix. Inducing inputs are parametrized as ``Z = A @ x_tilde`` with
``A`` (M x R) trainable, so every training-time kernel evaluation only needs
``gram_tilde = x_tilde @ x_tilde.T`` and the projections ``X_b @ x_tilde.T``.
"""

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from ._io import atomic_savez
from .data import as_csr
from .errors import CheckpointError

__all__ = [
    "Basis",
    "RankDeficientWarning",
    "truncated_svd",
    "build_basis",
    "kmeans",
    "init_subspace_coeffs",
    "save_basis",
    "load_basis",
]

BASIS_FORMAT_VERSION = 1

# matrices with at most this many entries are decomposed densely
_DENSE_LIMIT = 25_000_000


class RankDeficientWarning(UserWarning):
    """Requested rank exceeds the numerical rank of the matrix."""


def _fix_signs(u, vt):
    # deterministic orientation: largest-magnitude entry of each u column positive
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.sign(u[idx, np.arange(u.shape[1])])
    signs[signs == 0] = 1.0
    return u * signs, vt * signs[:, None]


def _randomized(x, r, rng, n_oversamples=10, n_power_iter=2):
    n, d = x.shape
    ell = min(r + n_oversamples, min(n, d))
    q = x @ rng.standard_normal((d, ell))
    q, _ = la.qr(q, mode="economic")
    for _ in range(n_power_iter):
        w, _ = la.qr(x.T @ q, mode="economic")
        q, _ = la.qr(x @ w, mode="economic")
    b = np.asarray((x.T @ q).T)
    ub, s, vt = la.svd(b, full_matrices=False)
    return (q @ ub)[:, :r], s[:r], vt[:r]


def truncated_svd(x, r, seed=0, method="auto"):
    """Top-``r`` singular triplets of a (sparse) matrix.

    Parameters
    ----------
    x : sparse or dense (N, D) matrix
    r : int
        Requested rank, ``1 <= r <= min(N, D)``.
    seed : int or numpy Generator
        Starting vectors for the iterative solvers.
    method : {"auto", "dense", "lanczos", "randomized"}
        ``auto`` decomposes densely when the matrix is small enough and uses
        Lanczos (ARPACK) otherwise. ``randomized`` is a range finder with two
        power iterations and oversampling 10.

    Returns
    -------
    u : (N, r') ndarray, s : (r',) ndarray, vt : (r', D) ndarray
        ``r' < r`` only when the numerical rank is below ``r``; a
        :class:`RankDeficientWarning` is emitted in that case.
    """
    n, d = x.shape
    if not 1 <= r <= min(n, d):
        raise ValueError(f"rank must be in [1, {min(n, d)}], got {r}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if method == "auto":
        method = "dense" if n * d <= _DENSE_LIMIT or r >= min(n, d) - 1 else "lanczos"

    if method == "dense":
        dense = x.toarray() if sp.issparse(x) else np.asarray(x, dtype=np.float64)
        u, s, vt = la.svd(dense, full_matrices=False)
        u, s, vt = u[:, :r], s[:r], vt[:r]
    elif method == "lanczos":
        if r >= min(n, d):
            raise ValueError("lanczos needs r < min(N, D); use method='dense'")
        v0 = rng.standard_normal(min(n, d))
        u, s, vt = spla.svds(sp.csr_matrix(x) if sp.issparse(x) else x, k=r, v0=v0,
                             solver="arpack")
        order = np.argsort(s)[::-1]
        u, s, vt = u[:, order], s[order], vt[order]
    elif method == "randomized":
        u, s, vt = _randomized(x, r, rng)
    else:
        raise ValueError(f"unknown method {method!r}")

    tol = max(n, d) * np.finfo(np.float64).eps * (s[0] if s.size else 0.0)
    keep = int(np.sum(s > tol))
    if keep < r:
        warnings.warn(f"requested rank {r} but numerical rank is {keep}",
                      RankDeficientWarning, stacklevel=2)
        u, s, vt = u[:, :keep], s[:keep], vt[:keep]
    u, vt = _fix_signs(np.ascontiguousarray(u), np.ascontiguousarray(vt))
    return u, s, vt


@dataclass(frozen=True, eq=False)
class Basis:
    """Precomputed subspace data. ``cross_gram`` (N x R) is optional."""

    x_tilde: np.ndarray
    gram_tilde: np.ndarray
    singular_values: np.ndarray
    left_vectors: np.ndarray = None
    cross_gram: np.ndarray = None
    rank_deficient: bool = False

    @property
    def rank(self):
        return self.x_tilde.shape[0]

    @property
    def dim(self):
        return self.x_tilde.shape[1]

    def project(self, features, rows=None):
        """``features @ x_tilde.T``; served from ``cross_gram`` when ``rows`` index
        the training rows the basis was built on."""
        if rows is not None and self.cross_gram is not None:
            return self.cross_gram[np.asarray(rows)]
        if features.shape[1] != self.dim:
            raise ValueError(f"feature dimension {features.shape[1]} != basis dimension {self.dim}")
        return np.asarray(features @ self.x_tilde.T)

    def scores(self):
        """The N x R matrix ``U diag(S)`` (row coordinates in the subspace)."""
        if self.left_vectors is None:
            raise ValueError("basis was stored without left singular vectors")
        return self.left_vectors * self.singular_values


def build_basis(x, r, precompute_cross=False, seed=0, method="auto"):
    """Truncated SVD of ``x`` plus the R x R gram and, optionally, ``X X̃ᵀ``."""
    x = as_csr(x) if sp.issparse(x) else np.asarray(x, dtype=np.float64)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", RankDeficientWarning)
        u, s, vt = truncated_svd(x, r, seed=seed, method=method)
    deficient = any(issubclass(w.category, RankDeficientWarning) for w in caught)
    if deficient:
        warnings.warn(f"basis truncated to rank {s.size} (requested {r})",
                      RankDeficientWarning, stacklevel=2)
    cross = np.asarray(x @ vt.T) if precompute_cross else None
    return Basis(vt, vt @ vt.T, s, u, cross, deficient)


# ---------------------------------------------------------------------------
# k-means used to initialize A


def _sqdist(points, centroids):
    d = (np.sum(points ** 2, axis=1)[:, None] + np.sum(centroids ** 2, axis=1)[None, :]
         - 2.0 * points @ centroids.T)
    return np.maximum(d, 0.0)


def _kmeans_pp(points, m, rng):
    n = points.shape[0]
    centroids = np.empty((m, points.shape[1]))
    centroids[0] = points[rng.integers(n)]
    # exact differences here so already-chosen rows get probability zero
    closest = np.sum((points - centroids[0]) ** 2, axis=1)
    for j in range(1, m):
        total = closest.sum()
        if total > 0:
            idx = rng.choice(n, p=closest / total)
        else:
            idx = rng.integers(n)
        centroids[j] = points[idx]
        closest = np.minimum(closest, np.sum((points - centroids[j]) ** 2, axis=1))
    return centroids


def kmeans(points, m, n_iter, rng, return_history=False):
    """k-means++ seeding followed by ``n_iter`` Lloyd iterations.

    A cluster that loses all its points is re-seeded from a uniformly drawn
    data row. With ``return_history`` the objective (sum of squared distances)
    after seeding and after every iteration is returned as well.
    """
    points = np.asarray(points, dtype=np.float64)
    n = points.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"number of clusters must be in [1, {n}], got {m}")
    centroids = _kmeans_pp(points, m, rng)
    dist = _sqdist(points, centroids)
    history = [float(dist.min(axis=1).sum())]
    for _ in range(n_iter):
        assign = dist.argmin(axis=1)
        counts = np.bincount(assign, minlength=m)
        sums = np.zeros_like(centroids)
        np.add.at(sums, assign, points)
        nonempty = counts > 0
        centroids[nonempty] = sums[nonempty] / counts[nonempty, None]
        for j in np.flatnonzero(~nonempty):
            centroids[j] = points[rng.integers(n)]
        dist = _sqdist(points, centroids)
        history.append(float(dist.min(axis=1).sum()))
    if return_history:
        return centroids, history
    return centroids


def init_subspace_coeffs(basis, m, kmeans_iters=10, rng=None):
    """Initial ``A`` (M x R): k-means centroids of the rows of ``U diag(S)``."""
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    return kmeans(basis.scores(), m, kmeans_iters, rng)


# ---------------------------------------------------------------------------
# persistence


def save_basis(basis, path):
    arrays = {
        "format_version": np.array(BASIS_FORMAT_VERSION),
        "x_tilde": basis.x_tilde,
        "gram_tilde": basis.gram_tilde,
        "singular_values": basis.singular_values,
        "rank_deficient": np.array(basis.rank_deficient),
    }
    if basis.left_vectors is not None:
        arrays["left_vectors"] = basis.left_vectors
    if basis.cross_gram is not None:
        arrays["cross_gram"] = basis.cross_gram
    atomic_savez(path, arrays)


def load_basis(path):
    try:
        with np.load(path, allow_pickle=False) as f:
            version = int(f["format_version"])
            if version != BASIS_FORMAT_VERSION:
                raise CheckpointError(f"basis format version {version} unsupported")
            return Basis(
                f["x_tilde"], f["gram_tilde"], f["singular_values"],
                f["left_vectors"] if "left_vectors" in f.files else None,
                f["cross_gram"] if "cross_gram" in f.files else None,
                bool(f["rank_deficient"]),
            )
    except CheckpointError:
        raise
    except Exception as exc:  # zipfile / numpy raise a variety of types
        raise CheckpointError(f"cannot read basis archive {path}: {exc}") from exc
