import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from fsgp.basis import Basis
from fsgp.errors import NumericError
from fsgp.kernels import (InducingRepresentation, KernelSpec, as_inputs, cross_gram,
                          gram_inducing, kernel_diag)

from _builders import dense_kernel, orthonormal_basis

KINDS = ["linear", "squared_exponential"]


def _subspace(rng, m=4, r=3, d=6, spec_kind="linear"):
    xt = rng.normal(size=(r, d))
    basis = Basis(xt, xt @ xt.T, np.ones(r))
    a = rng.normal(size=(m, r))
    spec = KernelSpec(spec_kind, 0.3, 0.4) if spec_kind != "linear" else KernelSpec()
    return InducingRepresentation(a=a, basis=basis), spec


class TestSpec:
    def test_aliases_and_positivity(self):
        assert KernelSpec("se").kind == "squared_exponential"
        assert KernelSpec("rbf", -1.0, 2.0).lengthscale == pytest.approx(np.exp(2.0))
        assert KernelSpec().hyperparameter_names == ()
        with pytest.raises(ValueError):
            KernelSpec("matern")

    def test_rep_requires_one_variant(self):
        with pytest.raises(ValueError):
            InducingRepresentation()
        with pytest.raises(ValueError):
            InducingRepresentation(free_z=np.zeros((2, 2)), a=np.zeros((2, 2)))


class TestGram:
    def test_identity_a_selects_gram_tilde(self, rng):
        rep, spec = _subspace(rng, m=3, r=3)
        rep = rep.with_matrix(np.eye(3))
        np.testing.assert_allclose(gram_inducing(rep, spec), rep.basis.gram_tilde, atol=1e-14)

    def test_se_identical_rows(self, rng):
        rep, spec = _subspace(rng, spec_kind="se")
        a = rep.a.copy()
        a[1] = a[0]
        kz = gram_inducing(rep.with_matrix(a), spec)
        np.testing.assert_allclose(kz[:2, :2], spec.variance, rtol=1e-12)

    @pytest.mark.parametrize("kind", KINDS)
    def test_subspace_matches_free(self, rng, kind):
        rep, spec = _subspace(rng, spec_kind=kind)
        z = rep.z()
        free = InducingRepresentation(free_z=z)
        np.testing.assert_allclose(gram_inducing(rep, spec), gram_inducing(free, spec),
                                   atol=1e-10)
        np.testing.assert_allclose(gram_inducing(free, spec), dense_kernel(z, z, spec),
                                   atol=1e-10)

    @settings(max_examples=30, deadline=None)
    @given(st.sampled_from(KINDS), st.integers(1, 6), st.integers(0, 2**31 - 1))
    def test_properties(self, kind, m, seed):
        rng = np.random.default_rng(seed)
        rep, spec = _subspace(rng, m=m, spec_kind=kind)
        kz = gram_inducing(rep, spec)
        np.testing.assert_allclose(kz, kz.T, atol=1e-12)
        jitter = 1e-8 * max(np.mean(np.diag(kz)), 1e-300)
        np.linalg.cholesky(kz + jitter * np.eye(m))
        if kind == "linear":
            assert np.all(np.diag(kz) >= 0)
            c = 1.7
            np.testing.assert_allclose(gram_inducing(rep.with_matrix(c * rep.a), spec),
                                       c * c * kz, rtol=1e-12)
        else:
            assert np.all(kz > 0) and np.all(kz <= spec.variance * (1 + 1e-12))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_raises(self, rng):
        rep, spec = _subspace(rng)
        a = rep.a.copy()
        a[0, 0] = np.inf
        with pytest.raises(NumericError, match="K_Z"):
            gram_inducing(rep.with_matrix(a), spec)


class TestCross:
    def test_orthonormal_row_gives_a_column(self, rng):
        basis = orthonormal_basis(4, rng)
        a = rng.normal(size=(3, 4))
        rep = InducingRepresentation(a=a, basis=basis)
        x = sp.csr_matrix(basis.x_tilde[2:3])
        got = cross_gram(as_inputs(x, basis), rep, KernelSpec())
        np.testing.assert_allclose(got[0], a[:, 2], atol=1e-12)

    def test_se_huge_lengthscale(self, rng):
        rep, _ = _subspace(rng, spec_kind="se")
        spec = KernelSpec("se", 0.0, 10.0)
        x = sp.random(5, 6, density=0.5, format="csr", random_state=rng)
        got = cross_gram(as_inputs(x, rep.basis), rep, spec)
        np.testing.assert_allclose(got, 1.0, atol=1e-6)

    @pytest.mark.parametrize("kind", KINDS)
    def test_subspace_matches_free(self, rng, kind):
        rep, spec = _subspace(rng, spec_kind=kind)
        x = sp.random(5, 6, density=0.4, format="csr", random_state=rng)
        z = rep.z()
        sub = cross_gram(as_inputs(x, rep.basis), rep, spec)
        free = cross_gram(as_inputs(x), InducingRepresentation(free_z=z), spec)
        np.testing.assert_allclose(sub, free, atol=1e-10)
        np.testing.assert_allclose(free, dense_kernel(x, z, spec), atol=1e-10)

    @pytest.mark.parametrize("kind", KINDS)
    def test_diag(self, rng, kind):
        spec = KernelSpec(kind, 0.5, 0.0) if kind != "linear" else KernelSpec()
        x = sp.random(5, 6, density=0.4, format="csr", random_state=rng)
        np.testing.assert_allclose(kernel_diag(as_inputs(x), spec),
                                   np.diag(dense_kernel(x, x, spec)), atol=1e-12)
