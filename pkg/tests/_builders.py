"""Random instances and dense reference implementations shared by the tests.

The dense helpers here are written directly from the model equations with
explicit inverses and no reuse of package internals, so they serve as
independent oracles.
"""

import numpy as np
import scipy.sparse as sp

from fsgp.basis import Basis, build_basis
from fsgp.bound import ModelState
from fsgp.data import Dataset
from fsgp.kernels import InducingRepresentation, KernelSpec
from fsgp.variational import VariationalFactors


def random_dataset(n, d, k, rng, density=0.6, label_rate=0.35):
    x = sp.random(n, d, density=density, format="csr", random_state=rng,
                  data_rvs=rng.standard_normal)
    # keep every row non-empty so SE distances are generic
    for i in range(n):
        if x.indptr[i] == x.indptr[i + 1]:
            x = x.tolil()
            x[i, rng.integers(d)] = rng.standard_normal()
            x = x.tocsr()
    x.sort_indices()
    labels = [np.flatnonzero(rng.random(k) < label_rate) for _ in range(n)]
    return Dataset.from_label_lists(x, labels, k)


def random_state(data, m, p, r, kernel="linear", mode="subspace", rng=None, basis=None):
    """A generic (non-initial) state: every block random."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if basis is None:
        basis = build_basis(data.features, r, precompute_cross=True)
    a = rng.normal(0, 0.7, (m, basis.rank))
    if mode == "subspace":
        rep = InducingRepresentation(a=a, basis=basis)
    else:
        rep = InducingRepresentation(free_z=a @ basis.x_tilde)
    spec = KernelSpec(kernel, float(rng.normal(0, 0.2)), float(rng.normal(0.3, 0.2))) \
        if kernel != "linear" else KernelSpec("linear")
    factors = VariationalFactors(rng.normal(0, 0.5, (p, m)), rng.normal(-0.5, 0.4, (p, m)))
    return ModelState(rep, factors, rng.normal(0, 0.8, (data.n_labels, p)),
                      rng.normal(0, 0.5, data.n_labels), spec, data.n), basis


def orthonormal_basis(d, rng, x=None):
    """Full-rank basis whose rows are a random orthonormal basis of R^D."""
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    cross = np.asarray(x @ q) if x is not None else None
    return Basis(q.T.copy(), q.T @ q, np.ones(d), None, cross)


def dense_kernel(x1, x2, spec):
    x1 = np.asarray(x1.toarray() if sp.issparse(x1) else x1, dtype=float)
    x2 = np.asarray(x2.toarray() if sp.issparse(x2) else x2, dtype=float)
    if spec.kind == "linear":
        return x1 @ x2.T
    d2 = np.array([[np.sum((a - b) ** 2) for b in x2] for a in x1])
    return spec.variance * np.exp(-d2 / (2 * spec.lengthscale ** 2))


def slow_bound(state, data, quad_order=20):
    """Full bound written term by term with a dense explicit inverse."""
    from numpy.polynomial.hermite_e import hermegauss

    nodes, weights = hermegauss(quad_order)
    weights = weights / weights.sum()
    z = state.rep.z()
    x = data.features.toarray()
    kz = dense_kernel(z, z, state.kernel)
    kxz = dense_kernel(x, z, state.kernel)
    kxx = np.diag(dense_kernel(x, x, state.kernel))
    total = 0.0
    y = -np.ones((data.n, data.n_labels))
    for i in range(data.n):
        y[i, data.positives(i)] = 1.0
    mp, sp_ = [], []
    for p in range(state.phi.shape[1]):
        sig = state.factors.sigma[p]
        cinv = np.linalg.inv(kz + np.diag(sig))
        mp.append(kxz @ state.factors.mu[p])
        sp_.append(kxx - np.einsum("ij,jk,ik->i", kxz, cinv, kxz))
        total -= kl_dense(kz, state.factors.mu[p], sig)
    mp, sp_ = np.array(mp).T, np.array(sp_).T
    for i in range(data.n):
        for k in range(data.n_labels):
            mean = state.phi[k] @ mp[i] + state.bias[k]
            var = state.phi[k] ** 2 @ sp_[i]
            f = mean + np.sqrt(max(var, 0)) * nodes
            total -= weights @ np.logaddexp(0, -y[i, k] * f)
    return total


def gaussian_kl_dense(m_q, s_q, s_p):
    """KL(N(m_q, S_q) || N(0, S_p)) from the textbook formula."""
    pinv = np.linalg.inv(s_p)
    n = m_q.size
    _, ld_p = np.linalg.slogdet(s_p)
    _, ld_q = np.linalg.slogdet(s_q)
    return 0.5 * (np.trace(pinv @ s_q) + m_q @ pinv @ m_q - n + ld_p - ld_q)


def kl_dense(kz, mu, sig):
    """KL of q(u) = N(K μ, (K⁻¹ + Σ⁻¹)⁻¹) against N(0, K).

    Uses the textbook formula with explicit inverses when K is well
    conditioned, else the inverse-free rearrangement evaluated densely.
    """
    if np.linalg.cond(kz) < 1e10:
        s_q = np.linalg.inv(np.linalg.inv(kz) + np.diag(1.0 / sig))
        return gaussian_kl_dense(kz @ mu, s_q, kz)
    return kl_closed(kz, mu, sig)


def kl_closed(kz, mu, sig):
    c = kz + np.diag(sig)
    cinv = np.linalg.inv(c)
    return 0.5 * (mu @ kz @ mu - np.trace(cinv @ kz) + np.linalg.slogdet(c)[1]
                  - np.sum(np.log(sig)))
