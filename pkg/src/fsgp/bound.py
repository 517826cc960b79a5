"""Variational lower bound of the multi-label GP factor model and its gradient.

The bound is

    F = - Σ_i Σ_k E_q[log(1 + exp(-y_ik f_ik))] - Σ_p KL[q(u_p) || p(u_p)]

with ``q(f_ik)`` Gaussian (mean ``Σ_p φ_kp m_ip + b_k``, variance
``Σ_p φ_kp² s_ip``). The minibatch estimator rescales the data term by
``N / |B|`` and the sampled negatives of row ``i`` by ``|N_i| / |L_i|``.

Gradients are derived by hand and routed through the quadrature partials,
the triangular solves behind ``s_ip``, the KL, and the kernel. In subspace
mode nothing of size D enters the backward pass.
"""

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.sparse as sp

from . import kernels
from .data import full_batch
from .errors import NumericError
from .kernels import InducingRepresentation, KernelSpec, kernel_diag
from .likelihood import DEFAULT_ORDER, expected_log_logistic, gauss_hermite
from .variational import (VariationalFactors, _inverse_from_chol, _latent,
                          stable_factorize, utility_marginals)

__all__ = [
    "ModelState",
    "GradientBundle",
    "full_bound",
    "stochastic_bound",
    "gradient",
    "finite_diff_check",
    "FiniteDiffReport",
    "BLOCKS",
]

BLOCKS = ("inducing", "mu", "log_sigma", "phi", "bias", "log_variance", "log_lengthscale")


@dataclass(frozen=True, eq=False)
class ModelState:
    """All trainable quantities of the model.

    ``rep`` holds ``A`` (subspace mode) or ``Z`` (free mode); ``factors`` the
    per-process ``μ_p`` and raw ``Σ_p``; ``phi`` (K x P) and ``bias`` (K,) the
    linear map to utilities; ``kernel`` the hyperparameters.
    """

    rep: InducingRepresentation
    factors: VariationalFactors
    phi: np.ndarray
    bias: np.ndarray
    kernel: KernelSpec
    n_train: int = 0

    def __post_init__(self):
        p, m = self.factors.mu.shape
        if self.rep.m != m:
            raise ValueError(f"{self.rep.m} inducing inputs but factors have M={m}")
        if self.phi.ndim != 2 or self.phi.shape[1] != p:
            raise ValueError(f"phi must be K x {p}")
        if self.bias.shape != (self.phi.shape[0],):
            raise ValueError("bias must have one entry per label")

    @property
    def mode(self):
        return "subspace" if self.rep.is_subspace else "free_z"

    @property
    def dims(self):
        rep = self.rep
        return {
            "N": self.n_train,
            "D": rep.basis.dim if rep.is_subspace else rep.free_z.shape[1],
            "K": self.phi.shape[0],
            "M": rep.m,
            "P": self.phi.shape[1],
            "R": rep.basis.rank if rep.is_subspace else None,
        }

    def params(self):
        """Trainable blocks by name (arrays are not copied)."""
        out = {
            "inducing": self.rep.matrix,
            "mu": self.factors.mu,
            "log_sigma": self.factors.log_sigma,
            "phi": self.phi,
            "bias": self.bias,
        }
        for name in self.kernel.hyperparameter_names:
            out[name] = np.array(getattr(self.kernel, name))
        return out

    def with_params(self, params):
        """New state with the given blocks replaced (missing blocks kept)."""
        cur = self.params()
        cur.update(params)
        kern = self.kernel
        if kern.hyperparameter_names:
            kern = replace(kern, **{n: float(cur[n]) for n in kern.hyperparameter_names})
        return replace(
            self,
            rep=self.rep.with_matrix(np.asarray(cur["inducing"], dtype=np.float64)),
            factors=VariationalFactors(np.asarray(cur["mu"], dtype=np.float64),
                                       np.asarray(cur["log_sigma"], dtype=np.float64)),
            phi=np.asarray(cur["phi"], dtype=np.float64),
            bias=np.asarray(cur["bias"], dtype=np.float64),
            kernel=kern,
        )

    def to_free(self):
        """Equivalent free-mode state with ``Z = A X̃`` materialized."""
        if not self.rep.is_subspace:
            return self
        return replace(self, rep=InducingRepresentation(free_z=self.rep.z()))


class GradientBundle(dict):
    """Gradient blocks keyed like :meth:`ModelState.params`."""

    def scaled(self, c):
        return GradientBundle({k: c * v for k, v in self.items()})

    def norms(self):
        return {k: float(np.linalg.norm(v)) for k, v in self.items()}


def _evaluate(state, batch, n_total, rule, need_grad):
    rep, spec = state.rep, state.kernel
    mu = state.factors.mu
    log_sigma = state.factors.log_sigma
    sigma = state.factors.sigma
    n_proc = mu.shape[0]

    kz, gram_ctx = kernels._gram(rep, spec)
    chols = [stable_factorize(kz, sigma[p]) for p in range(n_proc)]
    cinvs = [_inverse_from_chol(c) for c in chols]
    kl = 0.0
    for p in range(n_proc):
        quad = mu[p] @ kz @ mu[p]
        trace = np.sum(cinvs[p] * kz)
        logdet_c = 2.0 * np.sum(np.log(np.diag(chols[p])))
        kl += 0.5 * (quad - trace + logdet_c - np.sum(np.log(sigma[p])))

    size = batch.size if batch is not None else 0
    data_term = 0.0
    cross_ctx = None
    if size:
        kxz, cross_ctx = kernels._cross(batch, rep, spec, gram_ctx)
        kdiag = kernel_diag(batch, spec)
        m, s, solves = _latent(kxz, kdiag, mu, chols)
        rows, labels, signs, weights = batch.pairs()
        mean, var = utility_marginals(state.phi, state.bias, m, s, rows, labels)
        val, d_mean, d_var = expected_log_logistic(signs, mean, var, rule)
        scale = n_total / size
        data_term = -scale * np.dot(weights, val)
    value = float(data_term - kl)
    if not np.isfinite(value):
        raise NumericError("bound is not finite", "bound")
    if not need_grad:
        return value, None

    k_labels = state.phi.shape[0]
    g_kz = np.zeros_like(kz)
    g_c = [np.zeros_like(kz) for _ in range(n_proc)]
    g_mu = -(mu @ kz)
    grads = GradientBundle()
    g_kxz = g_kdiag = None
    if size:
        gm = -scale * weights * d_mean
        gv = -scale * weights * d_var
        shape = (size, k_labels)
        gm_mat = sp.csr_matrix((gm, (rows, labels)), shape=shape)
        gv_mat = sp.csr_matrix((gv, (rows, labels)), shape=shape)
        grads["bias"] = np.bincount(labels, weights=gm, minlength=k_labels)
        grads["phi"] = (np.asarray(gm_mat.T @ m)
                        + 2.0 * state.phi * np.asarray(gv_mat.T @ s))
        g_m = np.asarray(gm_mat @ state.phi)
        g_s = np.asarray(gv_mat @ (state.phi ** 2))
        g_mu = g_mu + g_m.T @ kxz
        g_kxz = g_m @ mu
        g_kdiag = g_s.sum(axis=1)
        for p in range(n_proc):
            alpha = solves[p]  # M x B, columns (K_Z + Σ_p)⁻¹ k(Z, x_i)
            g_kxz -= 2.0 * (alpha * g_s[:, p]).T
            g_c[p] += (alpha * g_s[:, p]) @ alpha.T
    else:
        grads["bias"] = np.zeros(k_labels)
        grads["phi"] = np.zeros_like(state.phi)

    g_log_sigma = np.empty_like(log_sigma)
    for p in range(n_proc):
        cinv = cinvs[p]
        g_c[p] += -0.5 * cinv + 0.5 * (cinv * sigma[p]) @ cinv
        g_kz += g_c[p] - 0.5 * np.outer(mu[p], mu[p])
        g_sig = np.diag(g_c[p]) - 0.5 * np.diag(cinv) + 0.5 / sigma[p]
        g_log_sigma[p] = g_sig * np.exp(log_sigma[p])
    grads["mu"] = g_mu
    grads["log_sigma"] = g_log_sigma
    grads.update(kernels._backward(rep, spec, gram_ctx, g_kz, cross_ctx, g_kxz, g_kdiag))
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", name)
    return value, grads


def _rule(rule):
    if rule is None:
        return gauss_hermite(DEFAULT_ORDER)
    if isinstance(rule, int):
        return gauss_hermite(rule)
    return rule


def full_bound(state, data, rule=None):
    """Exact bound over all N rows and all K labels."""
    return _evaluate(state, full_batch(data), data.n, _rule(rule), False)[0]


def stochastic_bound(state, batch, n_total, rule=None):
    """Unbiased minibatch estimate of the bound (positives enumerated exactly)."""
    return _evaluate(state, batch, n_total, _rule(rule), False)[0]


def gradient(state, batch, n_total, rule=None):
    """Value of :func:`stochastic_bound` and its exact gradient.

    ``batch`` may be ``None`` (or empty), leaving only the KL term.
    """
    return _evaluate(state, batch, n_total, _rule(rule), True)


# ---------------------------------------------------------------------------
# finite differences


@dataclass
class FiniteDiffReport:
    """Per-block maximum relative discrepancy between analytic and numeric
    gradients, ``|g - fd| / max(|g|, |fd|, floor)``."""

    errors: dict
    value: float
    floor: float
    numeric: dict = field(default_factory=dict, repr=False)

    @property
    def max_error(self):
        return max(self.errors.values()) if self.errors else 0.0

    def passed(self, tol=1e-4):
        return all(e < tol for e in self.errors.values())

    def flagged(self, tol=1e-4):
        return [k for k, e in self.errors.items() if e >= tol]

    def lines(self):
        return [f"{k}: {e:.3e}" for k, e in self.errors.items()]


def finite_diff_check(state, batch, step=1e-5, n_total=None, grads=None, rule=None,
                      floor=1e-6):
    """Compare analytic gradients with central differences of the estimator.

    ``grads`` overrides the analytic gradient (used to test the checker
    itself). Deterministic given ``state`` and ``batch``.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    rule = _rule(rule)
    if n_total is None:
        n_total = batch.size if batch is not None else 1
    value, analytic = gradient(state, batch, n_total, rule)
    if grads is not None:
        analytic = grads
    params = {k: np.array(v, dtype=np.float64) for k, v in state.params().items()}
    errors, numeric = {}, {}
    for name, base in params.items():
        fd = np.zeros_like(base)
        flat = fd.reshape(-1)
        for idx in range(base.size):
            trial = base.copy().reshape(-1)
            orig = trial[idx]
            trial[idx] = orig + step
            up = stochastic_bound(state.with_params({name: trial.reshape(base.shape)}),
                                  batch, n_total, rule)
            trial[idx] = orig - step
            down = stochastic_bound(state.with_params({name: trial.reshape(base.shape)}),
                                    batch, n_total, rule)
            flat[idx] = (up - down) / (2.0 * step)
        g = np.asarray(analytic[name], dtype=np.float64).reshape(fd.shape)
        denom = np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)
        errors[name] = float(np.max(np.abs(g - fd) / denom)) if fd.size else 0.0
        numeric[name] = fd
    return FiniteDiffReport(errors, value, floor, numeric)
