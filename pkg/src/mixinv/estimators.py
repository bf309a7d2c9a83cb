"""Scikit-learn style estimators wrapping the inversion pipelines.

Both estimators treat the observation vector as the data handed to
``fit`` and expose their point estimates and uncertainties as fitted
attributes, so they compose with the usual ``get_params`` / ``clone``
machinery and pipeline tooling.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .linops import solve_whitened, whiten_operator
from .models import Observation
from .posterior import EvalConfig, PriorSpec, make_posterior_evaluator
from .regselect import default_c_grid, global_discrepancy, minimize_f_C
from .sampler import SamplerConfig, run_parallel_chain, run_single_chain

__all__ = ["BayesianInverter", "GlobalDiscrepancyInverter"]


def _check_observation(u) -> np.ndarray:
    u = np.asarray(u, dtype=float).ravel()
    if u.size == 0 or not np.all(np.isfinite(u)):
        raise ValueError("observation must be a non-empty finite vector")
    if np.linalg.norm(u) == 0.0:
        raise ValueError("observation must be non-zero")
    return u


def _reconstruct(model, u, m, C, cfg: EvalConfig):
    """Fitted data A_m g_min at one (m, C) point."""
    A = model.assemble(m)
    B = whiten_operator(A, model.R)
    h = solve_whitened(B, C, u, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter)
    g_min = model.R.solve(h)
    return A.matvec(g_min), g_min


class BayesianInverter(BaseEstimator):
    """Posterior sampling over geometry and regularization constant.

    ``fit(u)`` runs the three-stage sampler on the augmented posterior and
    stores the stage-3 statistics. The fitted attributes are ``mean_`` and
    ``cov_`` over the sampled coordinates (m..., log10 C), physical
    convenience views ``m_`` / ``log10_c_``, the expected most-likely noise
    level ``sigma_max_``, and the full ``chain_``.

    Parameters mirror :class:`mixinv.sampler.SamplerConfig`; ``prior``
    defaults to the model's admissible box with log10 C uniform on [-8, 2].
    """

    def __init__(
        self,
        model,
        prior=None,
        n1=200,
        n2=400,
        n3=4000,
        n_par=1,
        beta=0.05,
        scale=None,
        jitter=1e-10,
        transition_mode="index-chain",
        parallel="serial",
        cg_tol=1e-10,
        svd_rel_threshold=1e-10,
        random_state=0,
    ):
        self.model = model
        self.prior = prior
        self.n1 = n1
        self.n2 = n2
        self.n3 = n3
        self.n_par = n_par
        self.beta = beta
        self.scale = scale
        self.jitter = jitter
        self.transition_mode = transition_mode
        self.parallel = parallel
        self.cg_tol = cg_tol
        self.svd_rel_threshold = svd_rel_threshold
        self.random_state = random_state

    def fit(self, u, y=None):
        u = _check_observation(u)
        obs = Observation(u=u)
        prior = self.prior if self.prior is not None else PriorSpec(self.model.m_bounds)
        cfg = SamplerConfig(
            n1=self.n1,
            n2=self.n2,
            n3=self.n3,
            n_par=self.n_par,
            beta=self.beta,
            scale=self.scale,
            seed=self.random_state,
            jitter=self.jitter,
            transition_mode=self.transition_mode,
            parallel=self.parallel,
        ).validate()
        eval_cfg = EvalConfig(cg_tol=self.cg_tol, svd_rel_threshold=self.svd_rel_threshold)
        evaluator = make_posterior_evaluator(self.model, obs, prior, eval_cfg)
        run = run_single_chain if cfg.n_par == 1 else run_parallel_chain
        result = run(cfg, evaluator, prior.sample)

        stage3 = result.states[result.stage_marks[2]:]
        self.chain_ = result
        self.mean_ = stage3.mean(axis=0)
        self.cov_ = np.cov(stage3.T, ddof=1)
        self.std_ = np.sqrt(np.diag(self.cov_))
        self.m_ = self.mean_[:-1]
        self.log10_c_ = float(self.mean_[-1])
        sig = np.array(
            [
                ev.sigma_max_sq
                for ev in result.aux[result.stage_marks[2]:]
                if ev is not None and np.isfinite(ev.sigma_max_sq)
            ]
        )
        self.sigma_max_ = float(np.mean(np.sqrt(sig))) if sig.size else float("nan")
        self.acceptance_ = result.acceptance_rates
        self._u = u
        self._eval_cfg = eval_cfg
        return self

    def predict(self, X=None):
        """Reconstruct the fitted data at the posterior-mean state."""
        if not hasattr(self, "mean_"):
            raise NotFittedError("call fit before predict")
        u_fit, _ = _reconstruct(
            self.model, self._u, self.m_, 10.0**self.log10_c_, self._eval_cfg
        )
        return u_fit


class GlobalDiscrepancyInverter(BaseEstimator):
    """Uniform-C discrepancy selection followed by multi-start search.

    ``fit(u)`` computes C_bold = max over an m grid of the per-m
    discrepancy constants at threshold ``err_ratio * ||u||``, then
    minimizes the fixed-C Tikhonov functional from ``n_starts`` random
    starting points. Fitted attributes: ``C_``, ``m_``, ``f_value_``,
    ``local_minima_``, ``discrepancy_``.
    """

    def __init__(
        self,
        model,
        err_ratio=0.05,
        c_grid_size=100,
        c_lo=1e-8,
        c_hi=1e2,
        m_grid_points=7,
        n_starts=8,
        budget=4000,
        cg_tol=1e-10,
        svd_rel_threshold=1e-10,
        random_state=0,
    ):
        self.model = model
        self.err_ratio = err_ratio
        self.c_grid_size = c_grid_size
        self.c_lo = c_lo
        self.c_hi = c_hi
        self.m_grid_points = m_grid_points
        self.n_starts = n_starts
        self.budget = budget
        self.cg_tol = cg_tol
        self.svd_rel_threshold = svd_rel_threshold
        self.random_state = random_state

    def fit(self, u, y=None):
        u = _check_observation(u)
        eval_cfg = EvalConfig(cg_tol=self.cg_tol, svd_rel_threshold=self.svd_rel_threshold)
        c_grid = default_c_grid(self.c_grid_size, self.c_lo, self.c_hi)
        bounds = self.model.m_bounds
        axes = [np.linspace(lo, hi, self.m_grid_points) for lo, hi in bounds]
        mesh = np.meshgrid(*axes, indexing="ij")
        m_grid = np.column_stack([g.ravel() for g in mesh])

        err = self.err_ratio * float(np.linalg.norm(u))
        gd = global_discrepancy(self.model, u, err, m_grid, c_grid, eval_cfg)
        if gd.C_bold <= 0.0:
            raise ValueError(
                "no admissible regularization constant on the grid; "
                "increase err_ratio or widen the C grid"
            )
        rng = np.random.default_rng(self.random_state)
        starts = rng.uniform(bounds[:, 0], bounds[:, 1], size=(self.n_starts, len(bounds)))
        mm = minimize_f_C(self.model, u, gd.C_bold, starts, self.budget, cfg=eval_cfg)

        self.discrepancy_ = gd
        self.C_ = gd.C_bold
        self.m_ = mm.m_hat
        self.f_value_ = mm.f_value
        self.local_minima_ = mm.local_minima
        self.budget_exhausted_ = mm.budget_exhausted
        self._u = u
        self._eval_cfg = eval_cfg
        return self

    def predict(self, X=None):
        """Reconstruct the fitted data at the selected (m, C)."""
        if not hasattr(self, "m_"):
            raise NotFittedError("call fit before predict")
        u_fit, _ = _reconstruct(self.model, self._u, self.m_, self.C_, self._eval_cfg)
        return u_fit
