"""Draws from the multi-label GP factor model itself.

``h_p ~ N(0, K_X)`` exactly (dense Cholesky, jitter 1e-8), utilities
``F = H Φᵀ + b`` and labels ``y_ik = +1`` with probability ``σ(f_ik)``.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
from scipy.special import expit

from .data import Dataset
from .errors import NumericError
from .kernels import KernelSpec

__all__ = ["SynthSpec", "generate", "sample_latents", "dense_kernel"]

JITTER = 1e-8


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings.

    ``feature_decay`` scales column ``j`` of X by ``(j + 1) ** -feature_decay``,
    giving a decaying spectrum; 0 keeps the columns exchangeable.
    """

    n: int = 200
    d: int = 20
    k: int = 10
    p_true: int = 3
    kernel: KernelSpec = field(default_factory=KernelSpec)
    phi_scale: float = 1.0
    bias_range: tuple = (-2.0, 0.0)
    density: float = 0.3
    feature_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("n", "d", "k", "p_true"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 < self.density <= 1:
            raise ValueError("density must lie in (0, 1]")


def dense_kernel(x, spec):
    """Full N x N kernel matrix of the rows of ``x``."""
    x = x.toarray() if sp.issparse(x) else np.asarray(x, dtype=np.float64)
    lin = x @ x.T
    if spec.kind == "linear":
        return lin
    sq = np.diag(lin)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * lin, 0.0)
    return spec.variance * np.exp(-d2 / (2.0 * spec.lengthscale ** 2))


def sample_latents(x, spec, p, rng):
    """``p`` independent draws of ``h ~ N(0, K_X + jitter I)`` as an N x p matrix."""
    kx = dense_kernel(x, spec)
    if not np.all(np.isfinite(kx)):
        raise NumericError("non-finite kernel matrix", "K_X")
    n = kx.shape[0]
    for jitter in (JITTER, 1e-6):
        try:
            chol = la.cholesky(kx + jitter * np.eye(n), lower=True)
            break
        except la.LinAlgError:
            continue
    else:
        raise NumericError("kernel matrix not positive definite even with jitter", "K_X")
    return chol @ rng.standard_normal((n, p))


def _features(spec, rng):
    x = sp.random(spec.n, spec.d, density=spec.density, format="csr", random_state=rng,
                  data_rvs=rng.standard_normal)
    if spec.feature_decay:
        scale = (np.arange(spec.d) + 1.0) ** -spec.feature_decay
        x = sp.csr_matrix(x @ sp.diags(scale))
    x.sort_indices()
    return x


def generate(spec):
    """Sample a dataset from the generative model.

    Returns
    -------
    data : Dataset
    utilities : (N, K) ndarray
        Ground-truth ``f_ik``.
    phi : (K, P_true) ndarray
    bias : (K,) ndarray
    """
    rng = np.random.default_rng(spec.seed)
    x = _features(spec, rng)
    h = sample_latents(x, spec.kernel, spec.p_true, rng)
    phi = spec.phi_scale * rng.standard_normal((spec.k, spec.p_true))
    lo, hi = spec.bias_range
    bias = rng.uniform(lo, hi, size=spec.k) if hi > lo else np.full(spec.k, float(lo))
    f = h @ phi.T + bias
    y = rng.random(f.shape) < expit(f)
    labels = [np.flatnonzero(row) for row in y]
    return Dataset.from_label_lists(x, labels, spec.k), f, phi, bias
