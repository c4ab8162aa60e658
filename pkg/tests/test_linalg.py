import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stablekoopman.errors import DimensionError, DomainError
from stablekoopman.linalg import (eigenvalues, kron_sum, matexp, ou_covariance,
                                  ou_covariance_quadrature, thin_svd, unvec, vec)


def random_stable(rng, d):
    A = rng.standard_normal((d, d))
    return A - (np.max(np.linalg.eigvals(A).real) + 0.2) * np.eye(d)


class TestMatexp:
    def test_zero_time_is_identity(self):
        A = np.random.default_rng(0).standard_normal((4, 4))
        assert np.array_equal(matexp(A, 0.0), np.eye(4))

    @pytest.mark.parametrize("zeta,t", [(1.0, 0.3), (2.5, 4.0), (0.75, 13.0)])
    def test_rotation_block(self, zeta, t):
        c, s = math.cos(zeta * t), math.sin(zeta * t)
        got = matexp(np.array([[0.0, zeta], [-zeta, 0.0]]), t)
        assert np.allclose(got, [[c, s], [-s, c]], atol=1e-12)

    def test_diagonal(self):
        got = matexp(np.diag([-1.0, -2.0]), 1.0)
        assert np.allclose(got, np.diag([math.exp(-1), math.exp(-2)]), rtol=1e-14, atol=0)

    def test_against_eigendecomposition(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            V = rng.standard_normal((5, 5))
            lam = rng.uniform(-2, 0.5, 5)
            A = V @ np.diag(lam) @ np.linalg.inv(V)
            t = rng.uniform(0, 3)
            ref = V @ np.diag(np.exp(lam * t)) @ np.linalg.inv(V)
            assert np.max(np.abs(matexp(A, t) - ref)) <= 1e-9 * max(1.0, np.max(np.abs(ref)))

    def test_semigroup(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            A = rng.standard_normal((4, 4))
            A *= 2.0 / np.linalg.norm(A, 2)
            s, t = rng.uniform(0, 5, 2)
            assert np.linalg.norm(matexp(A, s + t) - matexp(A, s) @ matexp(A, t)) <= 1e-9 * np.linalg.norm(matexp(A, s + t))

    def test_determinant_identity(self):
        rng = np.random.default_rng(3)
        for d in range(1, 6):
            A = rng.standard_normal((d, d))
            t = rng.uniform(0, 2)
            ref = math.exp(t * np.trace(A))
            assert abs(np.linalg.det(matexp(A, t)) - ref) <= 1e-8 * ref

    def test_large_norm_accuracy(self):
        A = np.array([[-1.0, 8.0], [-8.0, -1.0]])
        t = 1.2
        c, s = math.cos(8 * t), math.sin(8 * t)
        ref = math.exp(-t) * np.array([[c, s], [-s, c]])
        assert np.max(np.abs(matexp(A, t) - ref)) <= 1e-12 * np.max(np.abs(ref)) * 10

    def test_rejects_bad_input(self):
        with pytest.raises(DimensionError):
            matexp(np.ones((2, 3)))
        with pytest.raises(DomainError):
            matexp(np.array([[np.nan]]))


class TestEigenvalues:
    def test_diagonal(self):
        lam = eigenvalues(np.diag([-1.0, -0.05]))
        assert sorted(lam.real) == [-1.0, -0.05] and np.all(lam.imag == 0)

    def test_complex_pair(self):
        a, b = 0.3, 1.7
        lam = eigenvalues(np.array([[-a, b], [-b, -a]]))
        assert np.allclose(sorted(lam, key=lambda v: v.imag), [-a - 1j * b, -a + 1j * b], atol=1e-14)

    def test_identity(self):
        assert np.allclose(eigenvalues(np.eye(3)), [1, 1, 1])

    def test_trace_and_determinant(self):
        rng = np.random.default_rng(4)
        for d in range(1, 7):
            for _ in range(10):
                A = rng.standard_normal((d, d))
                lam = eigenvalues(A)
                tr, det = np.trace(A), np.linalg.det(A)
                assert abs(lam.sum() - tr) <= 1e-8 * (1 + abs(tr))
                assert abs(np.prod(lam) - det) <= 1e-8 * (1 + abs(det))

    def test_matches_reference_solver(self):
        rng = np.random.default_rng(5)
        for d in (8, 20, 40):
            A = rng.standard_normal((d, d))
            ours = np.sort_complex(eigenvalues(A))
            ref = np.sort_complex(np.linalg.eigvals(A))
            assert np.max(np.abs(ours - ref)) < 1e-8 * (1 + np.max(np.abs(ref)))

    def test_conjugate_pairs_exact(self):
        lam = eigenvalues(np.random.default_rng(6).standard_normal((9, 9)))
        cplx = lam[lam.imag != 0]
        assert np.array_equal(np.sort_complex(cplx), np.sort_complex(cplx.conj()))

    def test_tiny_entries_do_not_stall(self):
        K = np.array([[-8e-301, 0.75, 0.0], [-0.75, -0.656, 0.826], [0.0, -0.826, 0.0]])
        lam = eigenvalues(K)
        assert np.allclose(np.sort_complex(lam), np.sort_complex(np.linalg.eigvals(K)), atol=1e-12)

    def test_sorted_by_real_part_descending(self):
        lam = eigenvalues(np.diag([-3.0, 0.5, -1.0]))
        assert list(lam.real) == [0.5, -1.0, -3.0]


class TestSVD:
    def test_identity(self):
        _, s, _ = thin_svd(np.eye(2))
        assert np.allclose(s, [1, 1])

    def test_diagonal(self):
        _, s, _ = thin_svd(np.diag([3.0, 2.0, 0.0]))
        assert np.allclose(s, [3, 2, 0])

    def test_rank_one(self):
        u, v = np.array([1.0, 2.0, 2.0]), np.array([3.0, 4.0])
        _, s, _ = thin_svd(np.outer(u, v))
        assert abs(s[0] - 15.0) < 1e-12 and np.all(np.abs(s[1:]) < 1e-12)

    @pytest.mark.parametrize("shape", [(7, 3), (3, 7), (5, 5)])
    def test_reconstruction_and_orthonormality(self, shape):
        X = np.random.default_rng(7).standard_normal(shape)
        U, s, V = thin_svd(X)
        assert np.linalg.norm(U @ np.diag(s) @ V.T - X) <= 1e-10 * np.linalg.norm(X)
        assert np.max(np.abs(U.T @ U - np.eye(U.shape[1]))) <= 1e-10
        assert np.max(np.abs(V.T @ V - np.eye(V.shape[1]))) <= 1e-10
        assert np.all(np.diff(s) <= 0)


class TestKronSum:
    def test_zero(self):
        assert np.array_equal(kron_sum(np.zeros((2, 2)), np.zeros((2, 2))), np.zeros((4, 4)))

    def test_scalar(self):
        assert np.array_equal(kron_sum(np.array([[2.5]]), np.zeros((1, 1))), [[2.5]])

    def test_pairwise_spectrum(self):
        A = np.random.default_rng(8).standard_normal((3, 3))
        lam = np.linalg.eigvals(A)
        pairs = np.sort_complex((lam[:, None] + lam[None, :]).ravel())
        got = np.sort_complex(eigenvalues(kron_sum(A, A)))
        assert np.max(np.abs(got - pairs)) < 1e-10

    def test_vec_convention(self):
        rng = np.random.default_rng(9)
        A, B, X = (rng.standard_normal((3, 3)) for _ in range(3))
        # column stacking: (A (+) B) vec(X) = vec(B X + X A^T)
        assert np.allclose(kron_sum(A, B) @ vec(X), vec(B @ X + X @ A.T))
        assert np.array_equal(unvec(vec(X), 3), X)

    def test_mismatch(self):
        with pytest.raises(DimensionError):
            kron_sum(np.eye(2), np.eye(3))


class TestOUCovariance:
    def test_zero_time(self):
        K = random_stable(np.random.default_rng(10), 3)
        assert np.array_equal(ou_covariance(K, np.ones(3), 0.0), np.zeros((3, 3)))

    @pytest.mark.parametrize("a,q,t", [(0.5, 2.0, 1.0), (3.0, 0.1, 0.2), (0.05, 1.0, 40.0)])
    def test_scalar_closed_form(self, a, q, t):
        got = ou_covariance(np.array([[-a]]), np.array([q]), t)[0, 0]
        assert got == pytest.approx(q * (1 - math.exp(-2 * a * t)) / (2 * a), rel=1e-12)

    def test_against_quadrature(self):
        rng = np.random.default_rng(11)
        for _ in range(10):
            K = random_stable(rng, 3)
            lam = rng.uniform(0.1, 2.0, 3)
            t = rng.uniform(0.1, 3.0)
            S = ou_covariance(K, lam, t)
            # independent composite Simpson of exp(s K^T) diag(lam) exp(s K)
            s = np.linspace(0, t, 2001)
            vals = np.array([matexp(K, u).T @ np.diag(lam) @ matexp(K, u) for u in s])
            w = np.ones(len(s))
            w[1:-1:2], w[2:-1:2] = 4, 2
            ref = (t / (len(s) - 1) / 3) * np.tensordot(w, vals, axes=1)
            assert np.linalg.norm(S - ref) <= 1e-6 * np.linalg.norm(ref)

    def test_lyapunov_ode(self):
        rng = np.random.default_rng(12)
        K = random_stable(rng, 3)
        lam = rng.uniform(0.5, 1.5, 3)
        t, h = 1.3, 1e-4
        dS = (ou_covariance(K, lam, t + h) - ou_covariance(K, lam, t - h)) / (2 * h)
        S = ou_covariance(K, lam, t)
        assert np.max(np.abs(dS - (K.T @ S + S @ K + np.diag(lam)))) <= 1e-5

    def test_symmetric_psd(self):
        rng = np.random.default_rng(13)
        K = random_stable(rng, 4)
        S = ou_covariance(K, rng.uniform(0, 1, 4), 2.0)
        assert np.array_equal(S, S.T)
        assert np.min(np.linalg.eigvalsh(S)) >= -1e-12

    def test_singular_generator_falls_back(self):
        K = np.array([[0.0, 1.0], [-1.0, 0.0]])
        lam = np.array([1.0, 0.5])
        S = ou_covariance(K, lam, 2.0)
        assert np.allclose(S, ou_covariance_quadrature(K, lam, 2.0), atol=1e-8)
        # rotation-invariant average of the diffusion accumulates linearly
        assert np.trace(S) == pytest.approx(2.0 * lam.sum(), rel=1e-8)

    def test_bounded_and_monotone(self):
        rng = np.random.default_rng(14)
        K = random_stable(rng, 3)
        lam = np.ones(3)
        tops = [np.max(np.linalg.eigvalsh(ou_covariance(K, lam, t))) for t in np.linspace(0, 100, 41)]
        assert np.all(np.diff(tops) >= -1e-10)
        limit = np.max(np.linalg.eigvalsh(ou_covariance_quadrature(K, lam, 200.0)))
        assert tops[-1] <= limit * (1 + 1e-6)

    def test_negative_time(self):
        with pytest.raises(DomainError):
            ou_covariance(-np.eye(2), np.ones(2), -1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 2**31 - 1))
def test_matexp_inverse_property(d, seed):
    A = np.random.default_rng(seed).standard_normal((d, d))
    assert np.allclose(matexp(A, 1.0) @ matexp(A, -1.0), np.eye(d), atol=1e-9)
