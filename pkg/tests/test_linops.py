"""Tests for the regularized linear-algebra core.

Every fast path is checked against an independent dense oracle: triangular
solves for whitening, direct factorization for the normal equations, the
Gram-matrix eigenvalues for singular values, and dense determinants for
the spectral shortcut.
"""

import numpy as np
import pytest
import scipy.sparse as sp

from mixinv.exceptions import SingularRegularizerError, SolverConvergenceError
from mixinv.linops import (
    LinearOperator,
    RegularizerMatrix,
    SpectralSummary,
    WhitenedOperator,
    dense_det_oracle,
    influence_residual,
    log_det_whitened,
    solve_gmin,
    truncated_singular_values,
    whiten_operator,
)


def tridiag_spd(p, diag=2.0, off=-0.5):
    main = np.full(p, diag)
    offd = np.full(p - 1, off)
    return sp.diags_array([offd, main, offd], offsets=[-1, 0, 1], format="csc")


def random_whitened(rng, n, p):
    B = rng.standard_normal((n, p))
    return WhitenedOperator(B=B)


class TestRegularizerMatrix:
    def test_identity_certificate(self):
        R = RegularizerMatrix.identity(7)
        assert R.sigma_min == pytest.approx(1.0, rel=1e-6)
        assert R.sigma_max == pytest.approx(1.0, rel=1e-6)

    def test_singular_matrix_rejected(self):
        M = sp.csc_array(np.array([[1.0, 2.0], [2.0, 4.0]]))
        with pytest.raises(SingularRegularizerError):
            RegularizerMatrix(M)

    def test_solve_round_trip(self):
        rng = np.random.default_rng(0)
        R = RegularizerMatrix(tridiag_spd(9))
        b = rng.standard_normal(9)
        x = R.solve(b)
        np.testing.assert_allclose(R.matvec(x), b, atol=1e-12)
        y = R.solve_t(b)
        np.testing.assert_allclose(R.rmatvec(y), b, atol=1e-12)


class TestWhitenOperator:
    def test_identity_regularizer(self):
        A = LinearOperator(np.eye(3))
        B = whiten_operator(A, RegularizerMatrix.identity(3))
        np.testing.assert_allclose(B.B, np.eye(3))

    def test_scalar_scaling(self):
        rng = np.random.default_rng(1)
        entries = rng.standard_normal((4, 5))
        A = LinearOperator(entries)
        R = RegularizerMatrix(2.0 * sp.identity(5, format="csc"))
        B = whiten_operator(A, R)
        np.testing.assert_allclose(B.B, entries / 2.0, rtol=1e-14)

    def test_against_dense_solve_oracle(self):
        rng = np.random.default_rng(2)
        A = LinearOperator(rng.standard_normal((4, 6)))
        Rm = tridiag_spd(6)
        B = whiten_operator(A, RegularizerMatrix(Rm))
        # oracle: dense solve of B R = A column by column
        B_dense = np.linalg.solve(Rm.toarray().T, A.entries.T).T
        np.testing.assert_allclose(B.B, B_dense, rtol=1e-12)
        col_resid = np.linalg.norm(B.B @ Rm.toarray() - A.entries, axis=0)
        assert col_resid.max() < 1e-10

    def test_dimension_mismatch(self):
        A = LinearOperator(np.ones((2, 3)))
        with pytest.raises(ValueError):
            whiten_operator(A, RegularizerMatrix.identity(4))


class TestSolveGmin:
    def test_identity_halves_data(self):
        A = LinearOperator(np.eye(2))
        R = RegularizerMatrix.identity(2)
        g = solve_gmin(A, R, 1.0, np.array([2.0, 0.0]))
        np.testing.assert_allclose(g, [1.0, 0.0], atol=1e-12)

    def test_zero_data(self):
        A = LinearOperator(np.eye(2))
        R = RegularizerMatrix.identity(2)
        np.testing.assert_array_equal(solve_gmin(A, R, 0.5, np.zeros(2)), np.zeros(2))

    def test_against_dense_normal_equations(self):
        # random 5x12 operator with the built-in grid regularizer
        from mixinv.models import _regular_grid, make_R

        rng = np.random.default_rng(3)
        A = LinearOperator(rng.standard_normal((5, 12)))
        R = make_R(_regular_grid(3, 4, 1.0), eps0=1e-2)
        u = rng.standard_normal(5)
        g = solve_gmin(A, R, 0.1, u)
        Rd = R.matrix.toarray()
        oracle = np.linalg.solve(
            A.entries.T @ A.entries + 0.1 * Rd.T @ Rd, A.entries.T @ u
        )
        assert np.linalg.norm(g - oracle) <= 1e-8 * np.linalg.norm(oracle)

    @pytest.mark.parametrize("p", [50, 200])
    def test_matrix_free_matches_dense_at_scale(self, p):
        rng = np.random.default_rng(p)
        A = LinearOperator(rng.standard_normal((20, p)) / np.sqrt(p))
        Rm = tridiag_spd(p)
        R = RegularizerMatrix(Rm)
        u = rng.standard_normal(20)
        for C in (1e-3, 1.0, 10.0):
            g = solve_gmin(A, R, C, u, tol=1e-12)
            Rd = Rm.toarray()
            oracle = np.linalg.solve(
                A.entries.T @ A.entries + C * Rd.T @ Rd, A.entries.T @ u
            )
            assert np.linalg.norm(g - oracle) <= 1e-8 * np.linalg.norm(oracle)

    def test_nonconvergence_reported(self):
        rng = np.random.default_rng(4)
        A = LinearOperator(rng.standard_normal((3, 8)))
        R = RegularizerMatrix.identity(8)
        with pytest.raises(SolverConvergenceError) as exc_info:
            solve_gmin(A, R, 1e-6, rng.standard_normal(3), tol=1e-14, max_iter=2)
        assert exc_info.value.iterations == 2
        assert exc_info.value.residual > 0


class TestTruncatedSingularValues:
    def test_diagonal_case(self):
        B = WhitenedOperator(B=np.hstack([np.diag([3.0, 1.0]), np.zeros((2, 2))]))
        spec = truncated_singular_values(B, 1e-10)
        np.testing.assert_allclose(spec.singvals, [3.0, 1.0])
        assert spec.rank == 2

    def test_zero_operator(self):
        spec = truncated_singular_values(WhitenedOperator(B=np.zeros((3, 4))))
        assert spec.rank == 0
        assert spec.singvals.size == 0

    def test_against_gram_eigenvalue_oracle(self):
        rng = np.random.default_rng(5)
        M = rng.standard_normal((6, 20))
        spec = truncated_singular_values(WhitenedOperator(B=M), 1e-10)
        # oracle: eigenvalues of the Gram matrix B B'
        gram_eigs = np.linalg.eigvalsh(M @ M.T)[::-1]
        oracle = np.sqrt(np.clip(gram_eigs, 0.0, None))
        np.testing.assert_allclose(spec.singvals, oracle[: spec.rank], rtol=1e-10)

    def test_threshold_truncates(self):
        B = WhitenedOperator(B=np.diag([1.0, 1e-3, 1e-9]))
        spec = truncated_singular_values(B, rel_threshold=1e-6)
        assert spec.rank == 2

    def test_threshold_bounds(self):
        B = WhitenedOperator(B=np.eye(2))
        with pytest.raises(ValueError):
            truncated_singular_values(B, rel_threshold=1.5)


class TestLogDetWhitened:
    def test_empty_spectrum(self):
        spec = SpectralSummary(singvals=np.empty(0), rel_threshold=1e-10)
        assert log_det_whitened(spec, 1.0) == 0.0

    def test_single_value(self):
        spec = SpectralSummary(singvals=np.array([1.0]), rel_threshold=1e-10)
        assert log_det_whitened(spec, 1.0) == pytest.approx(-0.5 * np.log(2.0))

    def test_against_dense_determinant(self):
        rng = np.random.default_rng(6)
        for trial in range(5):
            n, p = rng.integers(2, 9, size=2)
            M = rng.standard_normal((n, p))
            spec = truncated_singular_values(WhitenedOperator(B=M), 1e-12)
            for C in (0.3, 1.0, 7.0):
                dense = -0.5 * np.linalg.slogdet(M.T @ M / C + np.eye(p))[1]
                assert log_det_whitened(spec, C) == pytest.approx(dense, abs=1e-8)

    def test_nonpositive(self):
        spec = SpectralSummary(singvals=np.array([2.0, 0.5]), rel_threshold=1e-10)
        assert log_det_whitened(spec, 0.1) < 0.0


class TestDenseDetOracle:
    def test_zero_matrix(self):
        assert dense_det_oracle(np.zeros((3, 4)), 2.0) == (1.0, 1.0, 1.0)

    def test_scalar_case(self):
        d1, d2, d3 = dense_det_oracle(np.array([[1.0]]), 1.0)
        assert d1 == pytest.approx(0.5)
        assert d2 == pytest.approx(0.5)
        assert d3 == pytest.approx(0.5)

    def test_three_expressions_agree(self):
        rng = np.random.default_rng(7)
        for trial in range(50):
            n, p = rng.integers(1, 9, size=2)
            B = rng.standard_normal((n, p))
            for C in (1e-3, 1.0, 1e3):
                d1, d2, d3 = dense_det_oracle(B, C)
                assert abs(d1 - d2) <= 1e-10 * abs(d1)
                assert abs(d1 - d3) <= 1e-10 * abs(d1)

    def test_size_guard(self):
        with pytest.raises(ValueError):
            dense_det_oracle(np.zeros((65, 2)), 1.0)


class TestInfluenceResidual:
    def dense_pieces(self, M, C, u):
        n, p = M.shape
        resid_op = np.eye(n) - M @ np.linalg.solve(M.T @ M + C * np.eye(p), M.T)
        return u @ resid_op @ u, np.trace(resid_op), np.linalg.norm(resid_op @ u) ** 2

    def test_zero_data(self):
        rng = np.random.default_rng(8)
        B = random_whitened(rng, 4, 7)
        spec = truncated_singular_values(B)
        quad, trace, resid = influence_residual(B, spec, 0.5, np.zeros(4))
        assert quad == 0.0 and resid == 0.0
        assert trace == pytest.approx(self.dense_pieces(B.B, 0.5, np.zeros(4))[1], rel=1e-10)

    def test_zero_operator(self):
        B = WhitenedOperator(B=np.zeros((3, 5)))
        spec = truncated_singular_values(B)
        u = np.array([1.0, 2.0, -1.0])
        quad, trace, resid = influence_residual(B, spec, 1.0, u)
        assert quad == pytest.approx(u @ u)
        assert trace == pytest.approx(3.0)
        assert resid == pytest.approx(u @ u)

    def test_against_dense_formula(self):
        rng = np.random.default_rng(9)
        B = random_whitened(rng, 5, 9)
        spec = truncated_singular_values(B)
        u = rng.standard_normal(5)
        quad, trace, resid = influence_residual(B, spec, 0.5, u)
        dq, dt, dr = self.dense_pieces(B.B, 0.5, u)
        assert quad == pytest.approx(dq, rel=1e-8)
        assert trace == pytest.approx(dt, rel=1e-8)
        assert resid == pytest.approx(dr, rel=1e-8)

    def test_quad_form_positive(self):
        rng = np.random.default_rng(10)
        for trial in range(20):
            B = random_whitened(rng, 4, 6)
            spec = truncated_singular_values(B)
            u = rng.standard_normal(4)
            C = float(10.0 ** rng.uniform(-6, 3))
            quad, _, _ = influence_residual(B, spec, C, u)
            assert quad > 0.0

    def test_residual_monotone_in_C(self):
        rng = np.random.default_rng(11)
        B = random_whitened(rng, 5, 8)
        spec = truncated_singular_values(B)
        u = rng.standard_normal(5)
        values = [
            influence_residual(B, spec, C, u)[2] for C in np.geomspace(1e-6, 1e6, 25)
        ]
        assert np.all(np.diff(values) >= -1e-9 * (u @ u))
