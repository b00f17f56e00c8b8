import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adm import linalg
from adm.errors import DimensionMismatch, NotPositiveDefinite, NotPSD


A22 = np.array([[4.0, 2.0], [2.0, 5.0]])


def spd_from_seed(seed, c, eps=1e-3):
    a = np.random.default_rng(seed).standard_normal((c, c))
    return a.T @ a + eps * np.eye(c)


def rel_fro(a, b):
    return np.linalg.norm(a - b) / np.linalg.norm(b)


class TestCholesky:
    def test_diagonal(self):
        np.testing.assert_array_equal(linalg.cholesky(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]))

    def test_two_by_two(self):
        L = linalg.cholesky(A22)
        np.testing.assert_allclose(L, [[2.0, 0.0], [1.0, 2.0]], atol=1e-15)
        np.testing.assert_allclose(L @ L.T, A22, atol=1e-14)

    def test_identity(self):
        np.testing.assert_array_equal(linalg.cholesky(np.eye(5)), np.eye(5))

    def test_not_pd_raises(self):
        with pytest.raises(NotPositiveDefinite):
            linalg.cholesky([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(NotPositiveDefinite):
            linalg.cholesky(np.diag([1.0, 0.0]))

    def test_rejects_asymmetric(self):
        with pytest.raises(DimensionMismatch):
            linalg.cholesky([[1.0, 0.5], [0.0, 1.0]])

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 32), st.integers(0, 2**32 - 1))
    def test_reconstruction(self, c, seed):
        a = spd_from_seed(seed, c)
        L = linalg.cholesky(a)
        assert np.all(np.triu(L, 1) == 0)
        assert np.all(np.diag(L) > 0)
        assert rel_fro(L @ L.T, a) <= 1e-10

    def test_batched_matches_single(self, rng):
        stack = np.stack([spd_from_seed(s, 6) for s in range(4)])
        batched = linalg.cholesky(stack)
        for i in range(4):
            np.testing.assert_array_equal(batched[i], linalg.cholesky(stack[i]))


class TestLogDetAndSolve:
    def test_log_det(self):
        assert linalg.log_det(linalg.cholesky(np.eye(3))) == 0.0
        assert linalg.log_det(linalg.cholesky(np.diag([4.0, 9.0]))) == pytest.approx(np.log(36), abs=1e-14)
        assert linalg.log_det(linalg.cholesky(A22)) == pytest.approx(np.log(16), abs=1e-14)

    def test_solve_examples(self):
        b = np.array([3.0, -1.0, 2.0])
        np.testing.assert_array_equal(linalg.spd_solve(np.eye(3), b), b)
        np.testing.assert_allclose(linalg.spd_solve(linalg.cholesky(np.diag([4.0, 9.0])), [4.0, 18.0]), [1.0, 2.0])
        inv = linalg.spd_solve(linalg.cholesky(A22), np.eye(2))
        np.testing.assert_allclose(inv, np.array([[5.0, -2.0], [-2.0, 4.0]]) / 16, atol=1e-15)

    def test_solve_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            linalg.spd_solve(np.eye(3), np.ones(2))
        with pytest.raises(DimensionMismatch):
            linalg.spd_solve(np.eye(3), np.ones((2, 2)))

    def test_trace_solve(self, rng):
        B = rng.standard_normal((3, 3))
        B = B + B.T
        assert linalg.trace_solve(np.eye(3), B) == pytest.approx(np.trace(B), abs=1e-14)
        assert linalg.trace_solve(linalg.cholesky(np.diag([2.0, 4.0])), np.diag([6.0, 8.0])) == pytest.approx(5.0)
        assert linalg.trace_solve(linalg.cholesky(A22), np.eye(2)) == pytest.approx(9 / 16, abs=1e-15)
        with pytest.raises(DimensionMismatch):
            linalg.trace_solve(np.eye(3), np.eye(2))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 32), st.integers(0, 2**32 - 1))
    def test_solve_recovers_x(self, c, seed):
        a = spd_from_seed(seed, c, eps=0.1)
        x = np.random.default_rng(seed + 1).standard_normal((c, 2))
        got = linalg.spd_solve(linalg.cholesky(a), a @ x)
        assert np.linalg.norm(got - x) <= 1e-8 * np.linalg.norm(x)
        residual = np.linalg.norm(a @ got - a @ x) / np.linalg.norm(a @ x)
        assert residual <= 1e-10


class TestEigh:
    def test_diagonal(self):
        w, V = linalg.eigh(np.diag([3.0, 1.0]))
        np.testing.assert_array_equal(w, [1.0, 3.0])
        np.testing.assert_array_equal(np.abs(V), [[0.0, 1.0], [1.0, 0.0]])

    def test_two_by_two(self):
        w, V = linalg.eigh([[2.0, 1.0], [1.0, 2.0]])
        np.testing.assert_allclose(w, [1.0, 3.0], atol=1e-15)

    def test_identity(self):
        w, V = linalg.eigh(np.eye(4))
        np.testing.assert_array_equal(w, np.ones(4))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 40), st.integers(0, 2**32 - 1))
    def test_reconstruction_and_orthogonality(self, c, seed):
        a = np.random.default_rng(seed).standard_normal((c, c))
        a = a + a.T
        w, V = linalg.eigh(a)
        norm = np.linalg.norm(a)
        assert np.all(np.diff(w) >= 0)
        assert np.linalg.norm(V @ np.diag(w) @ V.T - a) <= 1e-9 * (1 + norm)
        assert np.max(np.abs(V.T @ V - np.eye(c))) <= 1e-10
        assert abs(np.sum(w) - np.trace(a)) <= 1e-9 * (1 + abs(np.trace(a)))

    @pytest.mark.parametrize("c", [2, 3, 5, 8])
    def test_product_matches_determinant(self, c, rng):
        a = spd_from_seed(c, c, eps=0.5)
        w, _ = linalg.eigh(a)
        det = np.exp(linalg.log_det(linalg.cholesky(a)))
        assert np.prod(w) == pytest.approx(det, rel=1e-7)

    def test_large_matrix(self):
        a = spd_from_seed(7, 128)
        w, V = linalg.eigh(a)
        assert np.linalg.norm((V * w) @ V.T - a) <= 1e-9 * (1 + np.linalg.norm(a))

    def test_eigvalsh_matches(self, rng):
        a = spd_from_seed(3, 9)
        np.testing.assert_array_equal(linalg.eigvalsh(a), linalg.eigh(a)[0])


class TestSqrtm:
    def test_examples(self):
        np.testing.assert_allclose(linalg.sqrtm_psd(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-15)
        np.testing.assert_allclose(linalg.sqrtm_psd(np.eye(3)), np.eye(3), atol=1e-15)
        np.testing.assert_allclose(linalg.sqrtm_psd([[5.0, 4.0], [4.0, 5.0]]), [[2.0, 1.0], [1.0, 2.0]], atol=1e-14)

    def test_clamps_tiny_negative(self):
        root = linalg.sqrtm_psd(np.diag([1.0, -1e-12]))
        np.testing.assert_allclose(root, np.diag([1.0, 0.0]))

    def test_not_psd(self):
        with pytest.raises(NotPSD):
            linalg.sqrtm_psd(np.diag([1.0, -0.1]))

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 24), st.integers(0, 2**32 - 1), st.integers(0, 3))
    def test_square_reconstructs(self, c, seed, rank_drop):
        g = np.random.default_rng(seed).standard_normal((c, max(1, c - rank_drop)))
        a = g @ g.T
        root = linalg.sqrtm_psd(a)
        np.testing.assert_array_equal(root, root.T)
        assert np.min(np.linalg.eigvalsh(root)) >= -1e-8 * (1 + np.linalg.norm(a))
        assert np.linalg.norm(root @ root - a) <= 1e-8 * (1 + np.linalg.norm(a))
