"""Tests for the augmented posterior density and its oracles."""

import numpy as np
import pytest
import scipy.sparse as sp

from mixinv.exceptions import ZeroDataError
from mixinv.linops import (
    LinearOperator,
    RegularizerMatrix,
    WhitenedOperator,
    truncated_singular_values,
)
from mixinv.models import Observation, SlipBump, generate_observations, make_forward_model, synth_slip
from mixinv.posterior import (
    AugmentedState,
    PriorSpec,
    log_prior,
    log_unnormalized_posterior,
    ml_ratio,
    quadrature_marginal_oracle,
    sigma_max_sq,
)


@pytest.fixture(scope="module")
def tiny_problem():
    model = make_forward_model(nx=6, ny=6, extent=8.0, n_stations=10, station_extent=10.0)
    g = synth_slip(model.grid, [SlipBump(x=0.0, y=0.0, radius=4.0)])
    obs, truth = generate_observations(
        model, [-0.1, 0.1, -0.2], g, 0.05, np.random.default_rng(0)
    )
    return model, obs, truth


class TestLogPrior:
    def test_interior_point(self):
        prior = PriorSpec.default()
        state = AugmentedState(m=np.zeros(3), t=-3.0)
        assert log_prior(state, prior) == 0.0

    def test_t_outside_range(self):
        prior = PriorSpec.default()
        state = AugmentedState(m=np.zeros(3), t=3.0)
        assert log_prior(state, prior) == -np.inf

    def test_m_outside_box(self):
        prior = PriorSpec.default()
        state = AugmentedState(m=np.array([1.5, 0.0, 0.0]), t=-3.0)
        assert log_prior(state, prior) == -np.inf

    def test_default_ranges(self):
        prior = PriorSpec.default()
        assert prior.logC_range == (-8.0, 2.0)
        np.testing.assert_array_equal(prior.m_box, [[-1, 1]] * 3)

    def test_sample_inside_box(self):
        prior = PriorSpec.default()
        rng = np.random.default_rng(1)
        for _ in range(50):
            x = prior.sample(rng)
            assert prior.contains(x[:3], x[3])


class TestSigmaMaxSq:
    def test_zero_data(self):
        assert sigma_max_sq(1.0, 0.0, 0.0, 5) == 0.0

    def test_arithmetic(self):
        # C * reg_sq = 3, resid_sq = 1, n = 4 -> 1
        assert sigma_max_sq(1.5, 2.0, 1.0, 4) == pytest.approx(1.0)

    def test_grid_maximization_oracle(self):
        # the closed form maximizes the sigma-marginal likelihood: compare
        # against a log-grid argmax of the full expression
        rng = np.random.default_rng(2)
        for trial in range(10):
            n, p = 6, 4
            A = rng.standard_normal((n, p))
            Rd = rng.standard_normal((p, p)) + 3.0 * np.eye(p)
            u = rng.standard_normal(n)
            C = float(10.0 ** rng.uniform(-3, 2))
            g_min = np.linalg.solve(A.T @ A + C * Rd.T @ Rd, A.T @ u)
            reg_sq = float(np.linalg.norm(Rd @ g_min) ** 2)
            resid_sq = float(np.linalg.norm(u - A @ g_min) ** 2)

            sigmas = np.geomspace(1e-3, 1e3, 400)
            # log of the marginal density of u given (sigma, m, C), up to
            # sigma-independent terms
            log_marginal = -n * np.log(sigmas) - (C * reg_sq + resid_sq) / (2 * sigmas**2)
            best = sigmas[np.argmax(log_marginal)]
            closed = np.sqrt(sigma_max_sq(C, reg_sq, resid_sq, n))
            step = np.log(sigmas[1] / sigmas[0])
            assert abs(np.log(best) - np.log(closed)) <= step


class TestLogUnnormalizedPosterior:
    def test_prior_gate_skips_linear_algebra(self, tiny_problem):
        model, obs, _ = tiny_problem

        class ExplodingModel:
            m_bounds = model.m_bounds
            R = model.R

            def assemble(self, m):
                raise AssertionError("assembly must not run for gated states")

        ev = log_unnormalized_posterior(
            AugmentedState(m=np.array([2.0, 0.0, 0.0]), t=-3.0),
            obs,
            ExplodingModel(),
            PriorSpec.default(),
        )
        assert ev.log_density == -np.inf
        assert ev.g_min is None

    def test_purity_bit_identical(self, tiny_problem):
        model, obs, _ = tiny_problem
        state = AugmentedState(m=np.array([-0.1, 0.1, -0.2]), t=-2.5)
        prior = PriorSpec.default()
        e1 = log_unnormalized_posterior(state, obs, model, prior)
        e2 = log_unnormalized_posterior(state, obs, model, prior)
        assert e1.log_density == e2.log_density
        np.testing.assert_array_equal(e1.g_min, e2.g_min)
        assert e1.sigma_max_sq == e2.sigma_max_sq

    def test_zero_data_rejected(self, tiny_problem):
        model, obs, _ = tiny_problem

        class ZeroObs:
            u = np.zeros(model.n)

        with pytest.raises(ZeroDataError):
            log_unnormalized_posterior(
                AugmentedState(m=np.zeros(3), t=-3.0), ZeroObs(), model, PriorSpec.default()
            )

    def test_against_dense_composition_oracle(self):
        # n = 3, p = 2 dense problem: exp(log density) must equal the product
        # det(C^-1 B'B + I)^(-1/2) * (C reg + resid)^(-n/2) assembled densely
        rng = np.random.default_rng(3)
        A_entries = rng.standard_normal((3, 2))
        R_dense = np.array([[2.0, -0.3], [-0.3, 1.5]])

        class DenseModel:
            m_bounds = np.array([[-1.0, 1.0]])
            R = RegularizerMatrix(sp.csc_array(R_dense))
            n, p, q = 3, 2, 1

            def assemble(self, m):
                return LinearOperator(entries=A_entries * (1.0 + 0.5 * float(m[0])))

        u = rng.standard_normal(3)
        obs = Observation(u=u)
        prior = PriorSpec(m_box=np.array([[-1.0, 1.0]]), logC_range=(-8.0, 2.0))
        state = AugmentedState(m=np.array([0.3]), t=-0.7)
        ev = log_unnormalized_posterior(state, obs, DenseModel(), prior)

        C = 10.0**-0.7
        Ad = A_entries * 1.15
        Bd = Ad @ np.linalg.inv(R_dense)
        g_min = np.linalg.solve(Ad.T @ Ad + C * R_dense.T @ R_dense, Ad.T @ u)
        resid_sq = np.linalg.norm(u - Ad @ g_min) ** 2
        reg_sq = np.linalg.norm(R_dense @ g_min) ** 2
        det_term = np.linalg.det(Bd.T @ Bd / C + np.eye(2)) ** -0.5
        dense_value = det_term * (C * reg_sq + resid_sq) ** (-3.0 / 2.0)
        assert np.exp(ev.log_density) == pytest.approx(dense_value, rel=1e-8)
        assert ev.resid_sq == pytest.approx(resid_sq, rel=1e-8)
        assert ev.reg_sq == pytest.approx(reg_sq, rel=1e-8)
        assert ev.sigma_max_sq == pytest.approx((C * reg_sq + resid_sq) / 3.0, rel=1e-8)

    def test_gate_is_exact_complement_of_box(self, tiny_problem):
        # on a model whose every in-box geometry is admissible, the density is
        # -inf exactly off the box
        model, obs, _ = tiny_problem
        prior = PriorSpec(
            m_box=np.array([[-0.2, 0.2], [-0.2, 0.2], [-0.5, -0.1]]),
            logC_range=(-6.0, 0.0),
        )
        rng = np.random.default_rng(4)
        for _ in range(40):
            x = np.array(
                [
                    rng.uniform(-0.4, 0.4),
                    rng.uniform(-0.4, 0.4),
                    rng.uniform(-0.7, -0.05),
                    rng.uniform(-7.0, 1.0),
                ]
            )
            state = AugmentedState(m=x[:3], t=x[3])
            ev = log_unnormalized_posterior(state, obs, model, prior)
            inside = prior.contains(x[:3], x[3])
            assert np.isfinite(ev.log_density) == inside

    def test_large_C_limit_matches_zero_operator(self, tiny_problem):
        # as C -> infinity the determinant term vanishes and g_min -> 0, so
        # the log density approaches -(n/2) log ||u||^2
        model, obs, _ = tiny_problem
        prior = PriorSpec(m_box=model.m_bounds, logC_range=(-8.0, 13.0))
        state = AugmentedState(m=np.array([-0.1, 0.1, -0.2]), t=12.0)
        ev = log_unnormalized_posterior(state, obs, model, prior)
        n = obs.n
        limit = -0.5 * n * np.log(float(obs.u @ obs.u))
        assert ev.log_density == pytest.approx(limit, rel=1e-6)
        assert np.linalg.norm(ev.g_min) < 1e-8


class TestMlRatio:
    def test_zero_operator_returns_norm_sq(self):
        B = WhitenedOperator(B=np.zeros((4, 6)))
        spec = truncated_singular_values(B)
        u = np.array([1.0, -2.0, 0.5, 1.0])
        assert ml_ratio(B, spec, 1.0, u) == pytest.approx(float(u @ u))

    def test_quadratic_homogeneity_in_u(self):
        rng = np.random.default_rng(5)
        B = WhitenedOperator(B=rng.standard_normal((4, 7)))
        spec = truncated_singular_values(B)
        u = rng.standard_normal(4)
        r1 = ml_ratio(B, spec, 0.3, u)
        r2 = ml_ratio(B, spec, 0.3, 2.0 * u)
        assert r2 == pytest.approx(4.0 * r1, rel=1e-12)

    def test_against_dense_oracle(self):
        rng = np.random.default_rng(6)
        M = rng.standard_normal((5, 8))
        B = WhitenedOperator(B=M)
        spec = truncated_singular_values(B)
        u = rng.standard_normal(5)
        C = 0.7
        resid_op = np.eye(5) - M @ np.linalg.solve(M.T @ M + C * np.eye(8), M.T)
        dense = (u @ resid_op @ u) / np.linalg.det(resid_op) ** (1.0 / 5.0)
        assert ml_ratio(B, spec, C, u) == pytest.approx(dense, rel=1e-8)

    def test_zero_data_rejected(self):
        B = WhitenedOperator(B=np.ones((2, 2)))
        spec = truncated_singular_values(B)
        with pytest.raises(ZeroDataError):
            ml_ratio(B, spec, 1.0, np.zeros(2))


class TestQuadratureMarginalOracle:
    def test_decoupled_gaussian_when_A_is_zero(self):
        # A = 0: the integral is a pure Gaussian in g
        R_dense = np.array([[1.3, 0.2], [0.2, 0.9]])
        R = RegularizerMatrix(sp.csc_array(R_dense))
        A = LinearOperator(entries=np.zeros((3, 2)))
        u = np.array([0.4, -1.0, 0.2])
        C, sigma = 0.6, 0.8
        closed, quad = quadrature_marginal_oracle(A, R, C, sigma, u)
        expected = (
            np.exp(-float(u @ u) / (2 * sigma**2))
            * (2 * np.pi * sigma**2 / C)
            / np.sqrt(np.linalg.det(R_dense.T @ R_dense))
        )
        assert closed == pytest.approx(expected, rel=1e-12)
        assert abs(quad - closed) <= 1e-4 * abs(closed)

    def test_p1_scalar_problem(self):
        A = LinearOperator(entries=np.array([[1.5], [-0.7]]))
        R = RegularizerMatrix.identity(1)
        closed, quad = quadrature_marginal_oracle(A, R, 0.4, 0.5, np.array([1.0, 0.3]))
        assert abs(quad - closed) <= 1e-6 * abs(closed)

    def test_p2_random_instances(self):
        rng = np.random.default_rng(7)
        for trial in range(5):
            A = LinearOperator(entries=rng.standard_normal((4, 2)))
            Rd = rng.standard_normal((2, 2)) + 2.5 * np.eye(2)
            R = RegularizerMatrix(sp.csc_array(Rd))
            C = float(10.0 ** rng.uniform(-2, 1))
            sigma = float(10.0 ** rng.uniform(-1, 0.5))
            u = rng.standard_normal(4)
            closed, quad = quadrature_marginal_oracle(A, R, C, sigma, u)
            assert abs(quad - closed) <= 1e-4 * abs(closed)

    def test_dimension_guard(self):
        A = LinearOperator(entries=np.ones((2, 3)))
        R = RegularizerMatrix.identity(3)
        with pytest.raises(ValueError):
            quadrature_marginal_oracle(A, R, 1.0, 1.0, np.ones(2))
