import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from emloc import linalg
from emloc.linalg import (
    DimensionError,
    LinalgError,
    NotPositiveDefiniteError,
    SingularMatrixError,
)


def triple_loop(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            acc = 0.0
            for k in range(a.shape[1]):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


shapes = st.tuples(st.integers(1, 9), st.integers(1, 9))
seeds = st.integers(0, 2**31 - 1)


class TestMatmul:
    def test_identity(self, rng):
        a = rng.standard_normal((3, 4))
        assert np.array_equal(linalg.matmul(np.eye(3), a), a)

    def test_hand_example(self):
        out = linalg.matmul([[1, 2], [3, 4]], [[0], [1]])
        assert np.array_equal(out, [[2.0], [4.0]])

    def test_matches_triple_loop(self, rng):
        a, b = rng.standard_normal((5, 7)), rng.standard_normal((7, 3))
        np.testing.assert_allclose(linalg.matmul(a, b), triple_loop(a, b), rtol=0, atol=1e-12)

    def test_inner_dimension_mismatch(self):
        with pytest.raises(DimensionError):
            linalg.matmul(np.ones((2, 3)), np.ones((2, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(LinalgError):
            linalg.matmul([[np.nan]], [[1.0]])


class TestSvd:
    def test_identity(self):
        np.testing.assert_array_equal(linalg.svd(np.eye(3)).sigma, [1.0, 1.0, 1.0])

    def test_rank_one_against_quadratic_formula(self):
        a = np.array([[1.0, 2.0], [2.0, 4.0]])
        # eigenvalues of a^T a from its characteristic polynomial
        ata = a.T @ a
        tr, det = ata[0, 0] + ata[1, 1], ata[0, 0] * ata[1, 1] - ata[0, 1] * ata[1, 0]
        disc = math.sqrt(tr * tr - 4 * det)
        expected = [math.sqrt((tr + disc) / 2), math.sqrt(max((tr - disc) / 2, 0.0))]
        assert expected == [5.0, 0.0]
        np.testing.assert_allclose(linalg.svd(a).sigma, expected, atol=1e-12)

    def test_reconstruction(self, rng):
        a = rng.standard_normal((8, 6))
        np.testing.assert_allclose(linalg.svd(a).reconstruct(), a, atol=1e-10)

    def test_zero_matrix_gives_identity_columns(self):
        res = linalg.svd(np.zeros((4, 3)))
        np.testing.assert_array_equal(res.sigma, np.zeros(3))
        np.testing.assert_array_equal(res.u, np.eye(4, 3))
        np.testing.assert_array_equal(res.vt, np.eye(3))

    def test_sign_convention(self, rng):
        res = linalg.svd(rng.standard_normal((7, 5)))
        for j in range(res.u.shape[1]):
            col = res.u[:, j]
            assert col[np.argmax(np.abs(col))] >= 0

    def test_deterministic(self, rng):
        a = rng.standard_normal((9, 4))
        first, second = linalg.svd(a), linalg.svd(a.copy())
        assert first.u.tobytes() == second.u.tobytes()
        assert first.sigma.tobytes() == second.sigma.tobytes()
        assert first.vt.tobytes() == second.vt.tobytes()

    @given(shapes, seeds)
    def test_orthonormal_and_sorted(self, shape, seed):
        a = np.random.default_rng(seed).standard_normal(shape)
        res = linalg.svd(a)
        k = min(shape)
        assert np.max(np.abs(res.u.T @ res.u - np.eye(k))) <= 1e-10
        assert np.max(np.abs(res.vt @ res.vt.T - np.eye(k))) <= 1e-10
        assert np.all(np.diff(res.sigma) <= 0)
        assert np.all(res.sigma >= 0)


class TestTruncatedSvd:
    def test_rank_one_exact(self, rng):
        a = np.outer(rng.standard_normal(6), rng.standard_normal(4))
        np.testing.assert_allclose(linalg.truncated_svd(a, 1).reconstruct(), a, atol=1e-10)

    def test_identity_drop_one(self):
        err = np.linalg.norm(np.eye(3) - linalg.truncated_svd(np.eye(3), 2).reconstruct())
        assert err == pytest.approx(1.0, abs=1e-12)

    def test_tail_oracle(self, rng):
        a = rng.standard_normal((10, 8))
        tail = np.linalg.svd(a, compute_uv=False)[4:]
        err = np.linalg.norm(a - linalg.truncated_svd(a, 4).reconstruct())
        assert err == pytest.approx(np.sqrt(np.sum(tail**2)), abs=1e-10)

    @pytest.mark.parametrize("n", [0, 5])
    def test_rank_out_of_range(self, n):
        with pytest.raises(LinalgError):
            linalg.truncated_svd(np.ones((4, 4)), n)

    @given(shapes, seeds, st.data())
    def test_eckart_young(self, shape, seed, data):
        rng = np.random.default_rng(seed)
        a = rng.standard_normal(shape)
        n = data.draw(st.integers(1, min(shape)))
        best = np.linalg.norm(a - linalg.truncated_svd(a, n).reconstruct())
        for _ in range(100):
            p = rng.standard_normal((shape[0], n)) @ rng.standard_normal((n, shape[1]))
            assert best <= np.linalg.norm(a - p) + 1e-12


class TestCholesky:
    def test_identity(self):
        np.testing.assert_array_equal(linalg.cholesky(np.eye(4)), np.eye(4))

    def test_hand_example(self):
        l = linalg.cholesky([[4.0, 2.0], [2.0, 5.0]])
        np.testing.assert_allclose(l, [[2.0, 0.0], [1.0, 2.0]], atol=1e-15)
        np.testing.assert_allclose(l @ l.T, [[4.0, 2.0], [2.0, 5.0]], atol=1e-15)

    def test_negative_eigenvalue(self):
        with pytest.raises(NotPositiveDefiniteError, match="not positive definite"):
            linalg.cholesky([[1.0, 2.0], [2.0, 1.0]])

    def test_not_symmetric(self):
        with pytest.raises(LinalgError):
            linalg.cholesky([[1.0, 0.5], [0.0, 1.0]])

    def test_not_square(self):
        with pytest.raises(DimensionError):
            linalg.cholesky(np.ones((2, 3)))

    @given(st.integers(1, 10), seeds)
    def test_multiply_back(self, d, seed):
        m = np.random.default_rng(seed).standard_normal((d, d))
        a = m @ m.T + 0.1 * np.eye(d)
        l = linalg.cholesky(a)
        assert np.allclose(np.triu(l, 1), 0.0)
        assert np.max(np.abs(l @ l.T - a)) <= 1e-10 * max(1.0, np.max(np.abs(a)))


class TestTriangularSolve:
    def test_identity(self, rng):
        b = rng.standard_normal((3, 2))
        np.testing.assert_array_equal(linalg.solve_lower_triangular(np.eye(3), b), b)

    def test_forward_substitution_by_hand(self):
        x = linalg.solve_lower_triangular([[2.0, 0.0], [1.0, 2.0]], [[4.0], [5.0]])
        np.testing.assert_allclose(x, [[2.0], [1.5]], atol=1e-15)

    def test_random_residual(self, rng):
        l = np.tril(rng.standard_normal((6, 6))) + 4 * np.eye(6)
        b = rng.standard_normal((6, 3))
        assert np.max(np.abs(l @ linalg.solve_lower_triangular(l, b) - b)) <= 1e-10

    def test_transposed(self, rng):
        l = np.tril(rng.standard_normal((5, 5))) + 3 * np.eye(5)
        b = rng.standard_normal((5, 2))
        x = linalg.solve_lower_triangular(l, b, transpose=True)
        assert np.max(np.abs(l.T @ x - b)) <= 1e-10

    def test_zero_diagonal(self):
        with pytest.raises(SingularMatrixError):
            linalg.solve_lower_triangular([[1.0, 0.0], [1.0, 0.0]], [[1.0], [1.0]])

    def test_tiny_diagonal_relative_threshold(self):
        with pytest.raises(SingularMatrixError):
            linalg.solve_lower_triangular([[1.0, 0.0], [0.0, 1e-13]], [[1.0], [1.0]])


class TestGramSchmidt:
    @given(st.integers(1, 8), st.integers(1, 8), seeds)
    def test_qr(self, m, extra, seed):
        a = np.random.default_rng(seed).standard_normal((m + extra, m))
        q, r = linalg.gram_schmidt(a)
        assert np.max(np.abs(q.T @ q - np.eye(m))) <= 1e-10
        assert np.allclose(np.tril(r, -1), 0.0)
        assert np.max(np.abs(q @ r - a)) <= 1e-10
