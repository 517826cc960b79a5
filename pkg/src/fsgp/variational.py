"""The 2M-parameter variational family for each latent process.

For latent process ``p`` the inducing posterior is
``q(u_p) = N(K_Z μ_p, (K_Z⁻¹ + Σ_p⁻¹)⁻¹)`` with diagonal ``Σ_p``. The only
matrix ever factorized is ``K_Z + Σ_p``; ``K_Z`` itself is never inverted.
"""

from dataclasses import dataclass

import numpy as np
import scipy.linalg as la

from .errors import NumericError

__all__ = [
    "SIGMA_FLOOR",
    "VariationalFactors",
    "LatentMarginals",
    "UtilityMarginal",
    "sigma_from_raw",
    "stable_factorize",
    "latent_marginals",
    "utility_marginal",
    "utility_marginals",
    "kl_term",
]

SIGMA_FLOOR = 1e-6
VARIANCE_CLAMP = 1e-8


def sigma_from_raw(log_sigma):
    """Diagonal of Σ from its unconstrained parameters: ``exp(raw) + floor``."""
    return np.exp(log_sigma) + SIGMA_FLOOR


@dataclass(frozen=True, eq=False)
class VariationalFactors:
    """Rows ``mu[p]`` and ``log_sigma[p]`` parametrize ``q(u_p)``."""

    mu: np.ndarray
    log_sigma: np.ndarray

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape or self.mu.ndim != 2:
            raise ValueError("mu and log_sigma must both be P x M")

    @property
    def sigma(self):
        return sigma_from_raw(self.log_sigma)


@dataclass(frozen=True, eq=False)
class LatentMarginals:
    """Means ``m[i, p]`` and variances ``s[i, p]`` of ``q(h_p(x_i))``."""

    m: np.ndarray
    s: np.ndarray


@dataclass(frozen=True)
class UtilityMarginal:
    mean: float
    var: float


def stable_factorize(k_z, sigma_diag):
    """Lower Cholesky factor of ``K_Z + diag(sigma_diag)``; no jitter is added."""
    sigma_diag = np.asarray(sigma_diag, dtype=np.float64)
    if np.any(sigma_diag < SIGMA_FLOOR * (1 - 1e-12)):
        raise ValueError("sigma_diag below the stability floor")
    c = k_z + np.diag(sigma_diag)
    try:
        return la.cholesky(c, lower=True, check_finite=True)
    except (la.LinAlgError, ValueError) as exc:
        raise NumericError(f"Cholesky of K_Z + Sigma failed: {exc}", "K_Z") from exc


def _latent(kxz, kdiag, mu, chols):
    """Marginal means/variances plus the solves ``(K_Z + Σ_p)⁻¹ K_ZX`` reused
    by the gradient."""
    m = kxz @ mu.T
    s = np.empty_like(m)
    solves = []
    tol = VARIANCE_CLAMP * np.maximum(1.0, np.abs(kdiag))
    for p, chol in enumerate(chols):
        v = la.solve_triangular(chol, kxz.T, lower=True)
        s_p = kdiag - np.sum(v * v, axis=0)
        if np.any(s_p < -tol):
            raise NumericError(f"negative marginal variance {s_p.min():.3e}", f"s[{p}]")
        s[:, p] = np.maximum(s_p, 0.0)
        solves.append(la.solve_triangular(chol, v, lower=True, trans="T"))
    return m, s, solves


def latent_marginals(kxz, kdiag, factors, chols):
    """``m_p(x_i) = k(x_i, Z) μ_p`` and
    ``s_p(x_i) = k(x_i, x_i) - k(x_i, Z)(K_Z + Σ_p)⁻¹ k(Z, x_i)``.

    Round-off negatives above ``-1e-8`` (scaled by the prior variance) are
    clamped to zero; anything lower raises :class:`NumericError`.
    """
    m, s, _ = _latent(kxz, np.asarray(kdiag, dtype=np.float64), factors.mu, chols)
    return LatentMarginals(m, s)


def utility_marginal(phi_row, bias, m_row, s_row):
    """Gaussian marginal of ``f_k = Σ_p φ_kp h_p + b_k``."""
    phi_row = np.asarray(phi_row, dtype=np.float64)
    mean = float(np.dot(phi_row, m_row) + bias)
    var = float(np.dot(phi_row ** 2, s_row))
    return UtilityMarginal(mean, var)


def utility_marginals(phi, bias, m, s, rows, labels):
    """Vectorized :func:`utility_marginal` over (row, label) pairs."""
    ph = phi[labels]
    mean = np.einsum("ij,ij->i", ph, m[rows]) + bias[labels]
    var = np.einsum("ij,ij->i", ph * ph, s[rows])
    return mean, var


def _inverse_from_chol(chol):
    linv = la.solve_triangular(chol, np.eye(chol.shape[0]), lower=True)
    return linv.T @ linv


def kl_term(k_z, mu_p, sigma_diag, factor):
    """``KL[q(u_p) || p(u_p)]`` using the factor of ``K_Z + Σ_p``:

    ``½ μᵀK_Zμ - ½ tr((K_Z+Σ)⁻¹K_Z) + ½ log|K_Z+Σ| - ½ log|Σ|``.
    """
    cinv = _inverse_from_chol(factor)
    quad = mu_p @ k_z @ mu_p
    trace = np.sum(cinv * k_z)
    logdet_c = 2.0 * np.sum(np.log(np.diag(factor)))
    logdet_s = np.sum(np.log(sigma_diag))
    return float(0.5 * (quad - trace + logdet_c - logdet_s))
