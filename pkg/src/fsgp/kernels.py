"""Linear and squared-exponential kernels over free or subspace inducing inputs.

In the subspace path nothing of size D is touched: the inducing gram is
``A K_X̃ Aᵀ`` and the cross gram is ``(X_b X̃ᵀ) Aᵀ``. The squared-exponential
kernel is assembled from those linear grams through pairwise squared
distances ``d_a + d_b - 2 <a, b>``.
"""

from dataclasses import dataclass, replace

import numpy as np
import scipy.sparse as sp

from .errors import NumericError

__all__ = [
    "KernelSpec",
    "InducingRepresentation",
    "KernelInputs",
    "as_inputs",
    "gram_inducing",
    "cross_gram",
    "kernel_diag",
]

LINEAR = "linear"
SE = "squared_exponential"
_ALIASES = {"linear": LINEAR, "lin": LINEAR, "se": SE, "squared_exponential": SE, "rbf": SE}


@dataclass(frozen=True)
class KernelSpec:
    """Kernel family and log-domain hyperparameters.

    The linear kernel ``x·y`` has no hyperparameters; the squared exponential
    ``σ² exp(-|x - y|² / 2ℓ²)`` trains ``log_variance`` and ``log_lengthscale``.
    """

    kind: str = LINEAR
    log_variance: float = 0.0
    log_lengthscale: float = 0.0

    def __post_init__(self):
        kind = _ALIASES.get(str(self.kind).lower())
        if kind is None:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        object.__setattr__(self, "kind", kind)
        object.__setattr__(self, "log_variance", float(self.log_variance))
        object.__setattr__(self, "log_lengthscale", float(self.log_lengthscale))

    @property
    def variance(self):
        return float(np.exp(self.log_variance))

    @property
    def lengthscale(self):
        return float(np.exp(self.log_lengthscale))

    @property
    def hyperparameter_names(self):
        return ("log_variance", "log_lengthscale") if self.kind == SE else ()


@dataclass(frozen=True, eq=False)
class InducingRepresentation:
    """Either free inducing inputs ``Z`` (M x D) or coefficients ``A`` (M x R)
    on a :class:`~fsgp.basis.Basis`."""

    free_z: np.ndarray = None
    a: np.ndarray = None
    basis: object = None

    def __post_init__(self):
        if (self.free_z is None) == (self.a is None):
            raise ValueError("exactly one of free_z and a must be given")
        if self.a is not None:
            if self.basis is None:
                raise ValueError("subspace representation needs a basis")
            if self.a.shape[1] != self.basis.rank:
                raise ValueError(f"A has {self.a.shape[1]} columns, basis rank is {self.basis.rank}")

    @property
    def is_subspace(self):
        return self.a is not None

    @property
    def matrix(self):
        return self.a if self.is_subspace else self.free_z

    @property
    def m(self):
        return self.matrix.shape[0]

    def z(self):
        """Inducing inputs in the original D-dimensional space."""
        return self.a @ self.basis.x_tilde if self.is_subspace else self.free_z

    def with_matrix(self, value):
        return replace(self, a=value) if self.is_subspace else replace(self, free_z=value)


@dataclass(frozen=True, eq=False)
class KernelInputs:
    """Rows to evaluate the kernel on: sparse features, their squared norms, and
    optionally their projections on the basis."""

    features: sp.csr_matrix
    sqnorms: np.ndarray
    proj: np.ndarray = None


def as_inputs(x, basis=None):
    """Wrap a feature matrix (or pass through a Minibatch-like object)."""
    if hasattr(x, "sqnorms") and hasattr(x, "features"):
        return x
    from .data import as_csr

    x = as_csr(x)
    sq = np.asarray(x.multiply(x).sum(axis=1)).ravel()
    proj = basis.project(x) if basis is not None else None
    return KernelInputs(x, sq, proj)


def _check(value, block):
    if not np.all(np.isfinite(value)):
        raise NumericError("non-finite kernel entries", block)
    return value


def _linear_inducing(rep):
    if rep.is_subspace:
        a = rep.a
        return a @ rep.basis.gram_tilde @ a.T
    z = rep.free_z
    return z @ z.T


def _linear_cross(inputs, rep):
    if rep.is_subspace:
        proj = inputs.proj
        if proj is None:
            proj = rep.basis.project(inputs.features)
        return proj @ rep.a.T, proj
    x = inputs.features
    if x.shape[1] != rep.free_z.shape[1]:
        raise ValueError(f"feature dimension {x.shape[1]} != inducing dimension {rep.free_z.shape[1]}")
    return np.asarray(x @ rep.free_z.T), None


def _gram(rep, spec):
    lin = _linear_inducing(rep)
    ctx = {"lin": lin}
    if spec.kind == LINEAR:
        k = lin
    else:
        d = np.diag(lin).copy()
        raw = d[:, None] + d[None, :] - 2.0 * lin
        ctx["clamped"] = raw < 0.0
        dist = np.where(ctx["clamped"], 0.0, raw)
        k = spec.variance * np.exp(-dist / (2.0 * spec.lengthscale ** 2))
        ctx.update(d=d, dist=dist, k=k)
    return _check(k, "K_Z"), ctx


def _cross(inputs, rep, spec, gram_ctx=None):
    xlin, proj = _linear_cross(inputs, rep)
    ctx = {"proj": proj, "inputs": inputs}
    if spec.kind == LINEAR:
        k = xlin
    else:
        d = gram_ctx["d"] if gram_ctx is not None else np.diag(_linear_inducing(rep))
        raw = inputs.sqnorms[:, None] + d[None, :] - 2.0 * xlin
        ctx["clamped"] = raw < 0.0
        dist = np.where(ctx["clamped"], 0.0, raw)
        k = spec.variance * np.exp(-dist / (2.0 * spec.lengthscale ** 2))
        ctx.update(dist=dist, k=k)
    return _check(k, "K_XZ"), ctx


def gram_inducing(rep, spec):
    """M x M gram ``K_Z`` of the inducing inputs."""
    return _gram(rep, spec)[0]


def cross_gram(batch, rep, spec):
    """``|B| x M`` cross gram between the batch rows and the inducing inputs.

    ``batch`` is a :class:`~fsgp.data.Minibatch`, a :class:`KernelInputs`, or a
    sparse feature matrix. In subspace mode a precomputed ``batch.proj`` is used
    when present; otherwise ``X_b X̃ᵀ`` is formed by a sparse product.
    """
    return _cross(as_inputs(batch), rep, spec)[0]


def kernel_diag(batch, spec):
    """``k(x_i, x_i)`` for every batch row."""
    inputs = as_inputs(batch)
    if spec.kind == LINEAR:
        return np.asarray(inputs.sqnorms, dtype=np.float64)
    return np.full(inputs.sqnorms.shape[0], spec.variance)


def _backward(rep, spec, gram_ctx, g_kz, cross_ctx=None, g_kxz=None, g_kdiag=None):
    """Vector-Jacobian product of (K_Z, K_XZ, diag k) w.r.t. the inducing matrix
    and the kernel hyperparameters."""
    grads = {}
    g_xlin = None
    if spec.kind == LINEAR:
        g_lin = g_kz
        g_xlin = g_kxz
    else:
        c = 1.0 / (2.0 * spec.lengthscale ** 2)
        kz = gram_ctx["k"]
        gk = g_kz * kz
        h = np.where(gram_ctx["clamped"], 0.0, -c * gk)
        g_lin = -2.0 * h
        g_d = h.sum(axis=0) + h.sum(axis=1)
        g_logvar = gk.sum()
        g_loglen = 2.0 * c * np.sum(gk * gram_ctx["dist"])
        if g_kxz is not None:
            gkx = g_kxz * cross_ctx["k"]
            hx = np.where(cross_ctx["clamped"], 0.0, -c * gkx)
            g_xlin = -2.0 * hx
            g_d = g_d + hx.sum(axis=0)
            g_logvar += gkx.sum()
            g_loglen += 2.0 * c * np.sum(gkx * cross_ctx["dist"])
        if g_kdiag is not None:
            g_logvar += np.sum(g_kdiag) * spec.variance
        g_lin = g_lin + np.diag(g_d)
        grads["log_variance"] = float(g_logvar)
        grads["log_lengthscale"] = float(g_loglen)

    sym = g_lin + g_lin.T
    if rep.is_subspace:
        g = sym @ rep.a @ rep.basis.gram_tilde
        if g_xlin is not None:
            g = g + g_xlin.T @ cross_ctx["proj"]
    else:
        g = sym @ rep.free_z
        if g_xlin is not None:
            g = g + np.asarray(cross_ctx["inputs"].features.T @ g_xlin).T
    grads["inducing"] = g
    return grads
