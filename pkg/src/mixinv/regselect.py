"""Deterministic regularization-constant selection baselines.

Three classic single-m criteria (GCV, discrepancy/CLS, maximum
likelihood) plus the two strategies used to extend them to the nonlinear
parameter: a pointwise objective that re-selects C for every m, and the
global discrepancy construction that fixes one C for all m and then
minimizes the Tikhonov objective by multi-start simplex search.

All C searches are grid-first; the bisection refinement in
:func:`cls_select` is the only root-finder. Functions here take raw data
vectors so degenerate inputs (u = 0) remain expressible in tests.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.optimize

from .exceptions import NoRootError, PlaneIntersectsSurfaceError
from .linops import (
    SpectralSummary,
    WhitenedOperator,
    influence_residual,
    solve_whitened,
    truncated_singular_values,
    whiten_operator,
)
from .posterior import EvalConfig, ml_ratio
from .validation import as_vector, check_count, check_nonnegative, check_positive

__all__ = [
    "SelectionResult",
    "GlobalDiscrepancyResult",
    "MinimizeResult",
    "default_c_grid",
    "gcv_score",
    "gcv_select",
    "cls_select",
    "ml_select",
    "pointwise_objective",
    "global_discrepancy",
    "minimize_f_C",
]

CLS_TOL_FACTOR = 1e-8          # |residual^2 - n sigma^2| <= factor * ||u||^2
_MONOTONE_SLACK = 1e-9         # tolerated CG noise in monotonicity checks


@dataclass(frozen=True)
class SelectionResult:
    """Outcome of a single-criterion C selection."""

    C_star: float
    criterion_value: float
    method: str                       # "GCV" | "CLS" | "ML"
    grid: np.ndarray                  # the C grid or bracket that was searched
    sigma_est: float | None = None    # ML only


@dataclass(frozen=True)
class GlobalDiscrepancyResult:
    """The uniform constant C_bold = max over m of C_CLS(m)."""

    C_bold: float
    m_grid: np.ndarray                # (k, q) evaluated grid points
    c_values: np.ndarray              # (k,) per-point C_CLS values (grid members or 0)
    Err: float

    @property
    def per_m_values(self) -> dict:
        return {tuple(m): float(c) for m, c in zip(self.m_grid, self.c_values)}


@dataclass(frozen=True)
class MinimizeResult:
    """Best point of a multi-start simplex search plus all local minima."""

    m_hat: np.ndarray
    f_value: float
    local_minima: list                # (f, m) pairs sorted ascending by f
    budget_exhausted: bool
    n_evaluations: int


def default_c_grid(num: int = 100, lo: float = 1e-8, hi: float = 1e2) -> np.ndarray:
    """Log-spaced C grid matching the default log10 C prior range."""
    return np.geomspace(lo, hi, check_count(num, "num"))


def _ascending_grid(C_grid) -> np.ndarray:
    grid = as_vector(C_grid, "C_grid")
    if np.any(grid <= 0.0) or np.any(np.diff(grid) <= 0.0):
        raise ValueError("C_grid must be strictly ascending and positive")
    return grid


def gcv_score(
    B: WhitenedOperator, spec: SpectralSummary, C: float, u: np.ndarray
) -> float:
    """Generalized cross validation score ||(I-BB#)u||^2 / tr(I-BB#)^2."""
    quad_unused, trace, residual_norm_sq = influence_residual(B, spec, C, u)
    return residual_norm_sq / trace**2


def gcv_select(
    B: WhitenedOperator, spec: SpectralSummary, u: np.ndarray, C_grid
) -> SelectionResult:
    """Grid argmin of the GCV score; ties broken toward the larger C."""
    grid = _ascending_grid(C_grid)
    best_c, best_score = grid[0], np.inf
    for c in grid:
        score = gcv_score(B, spec, c, u)
        if score <= best_score:
            best_c, best_score = c, score
    return SelectionResult(
        C_star=float(best_c), criterion_value=float(best_score), method="GCV", grid=grid
    )


def cls_select(
    B: WhitenedOperator,
    spec: SpectralSummary,
    u: np.ndarray,
    sigma: float,
    bracket: tuple[float, float],
) -> SelectionResult:
    """Discrepancy-principle root: C with ||(I-BB#)u||^2 = n sigma^2.

    Bisection in log C on the bracket, down to
    |residual^2 - n sigma^2| <= 1e-8 ||u||^2. Residual monotonicity is
    verified on a coarse log grid before bisecting; a target outside the
    endpoint residuals raises :class:`NoRootError`, signalling a sigma
    inconsistent with the data.
    """
    u = as_vector(u, "u")
    check_nonnegative(sigma, "sigma")
    c_lo, c_hi = (check_positive(c, "bracket endpoint") for c in bracket)
    if not c_lo < c_hi:
        raise ValueError(f"bracket must satisfy lo < hi, got {bracket}")
    target = B.n * sigma**2
    norm_u_sq = float(u @ u)
    tol = CLS_TOL_FACTOR * norm_u_sq

    def res_sq(c: float) -> float:
        return influence_residual(B, spec, c, u)[2]

    if target > norm_u_sq:
        raise NoRootError(
            f"n sigma^2 = {target:.6g} exceeds ||u||^2 = {norm_u_sq:.6g}; "
            "the residual can never reach it"
        )
    probe_c = np.geomspace(c_lo, c_hi, 9)
    probe_r = np.array([res_sq(c) for c in probe_c])
    if np.any(np.diff(probe_r) < -_MONOTONE_SLACK * max(norm_u_sq, 1.0)):
        raise ValueError("residual^2 is not nondecreasing on the bracket")
    r_lo, r_hi = probe_r[0], probe_r[-1]
    if target < r_lo - tol:
        raise NoRootError(
            f"n sigma^2 = {target:.6g} lies below the achievable minimum residual "
            f"{r_lo:.6g} on the bracket"
        )
    if target > r_hi + tol:
        raise NoRootError(
            f"n sigma^2 = {target:.6g} exceeds the residual {r_hi:.6g} at the top "
            "of the bracket"
        )

    lo, hi = np.log(c_lo), np.log(c_hi)
    c_star, r_star = c_lo, r_lo
    for c, r in ((c_lo, r_lo), (c_hi, r_hi)):
        if abs(r - target) <= tol:
            c_star, r_star = c, r
            break
    else:
        for _ in range(200):
            mid = 0.5 * (lo + hi)
            c_mid = float(np.exp(mid))
            r_mid = res_sq(c_mid)
            c_star, r_star = c_mid, r_mid
            if abs(r_mid - target) <= tol:
                break
            if r_mid < target:
                lo = mid
            else:
                hi = mid
    return SelectionResult(
        C_star=float(c_star),
        criterion_value=float(r_star),
        method="CLS",
        grid=np.array([c_lo, c_hi]),
    )


def ml_select(
    B: WhitenedOperator, spec: SpectralSummary, u: np.ndarray, C_grid
) -> SelectionResult:
    """Grid argmin of the ML ratio, with the built-in noise estimate.

    sigma_est = sqrt(u'(I-BB#)u / n) at the selected C; ties broken toward
    the larger C.
    """
    grid = _ascending_grid(C_grid)
    best_c, best_val = grid[0], np.inf
    for c in grid:
        val = ml_ratio(B, spec, c, u)
        if val <= best_val:
            best_c, best_val = c, val
    quad_form, _, _ = influence_residual(B, spec, best_c, u)
    return SelectionResult(
        C_star=float(best_c),
        criterion_value=float(best_val),
        method="ML",
        grid=grid,
        sigma_est=float(np.sqrt(quad_form / B.n)),
    )


def _tikhonov_value(model, u, m, C, cfg: EvalConfig) -> float:
    """||A_m g_min - u||^2 + C ||R g_min||^2 at the Tikhonov minimizer."""
    A = model.assemble(m)
    B = whiten_operator(A, model.R)
    h = solve_whitened(B, C, u, tol=cfg.cg_tol, max_iter=cfg.cg_max_iter)
    g_min = model.R.solve(h)
    resid = u - A.matvec(g_min)
    Rg = model.R.matvec(g_min)
    return float(resid @ resid) + C * float(Rg @ Rg)


def pointwise_objective(
    m: np.ndarray,
    method: str,
    model,
    u: np.ndarray,
    C_grid,
    sigma: float | None = None,
    cfg: EvalConfig = EvalConfig(),
) -> float:
    """Per-m error functional with C selected at this m.

        f(m) = ||A_m g_min - u||^2 + C(m) ||R g_min||^2

    with C(m) chosen by GCV (grid argmin) or CLS (discrepancy root on the
    grid's span; requires ``sigma``). A CLS instance with no root, or an
    inadmissible geometry, maps to +inf so search loops can skim past it.
    Minimizing this functional over m is known to be unstable (many local
    minima); it exists as a documented comparison baseline.
    """
    if method not in ("GCV", "CLS"):
        raise ValueError(f"method must be 'GCV' or 'CLS', got {method!r}")
    grid = _ascending_grid(C_grid)
    u = np.asarray(u, dtype=float)
    try:
        A = model.assemble(m)
    except PlaneIntersectsSurfaceError:
        return np.inf
    B = whiten_operator(A, model.R)
    spec = truncated_singular_values(B, cfg.svd_rel_threshold)
    if method == "GCV":
        sel = gcv_select(B, spec, u, grid)
    else:
        if sigma is None:
            raise ValueError("CLS selection requires sigma")
        try:
            sel = cls_select(B, spec, u, sigma, (grid[0], grid[-1]))
        except NoRootError:
            return np.inf
    return _tikhonov_value(model, u, m, sel.C_star, cfg)


def global_discrepancy(
    model,
    u: np.ndarray,
    Err: float,
    m_grid,
    C_grid,
    cfg: EvalConfig = EvalConfig(),
) -> GlobalDiscrepancyResult:
    """Uniform C from the discrepancy principle maximized over an m grid.

    For each grid point m_i, project the data onto range(A_{m_i}) through
    the singular vectors of B and keep the largest grid C whose fitted
    data stays within ``Err`` of that projection; points whose projection
    residual already exceeds ``Err`` (and geometrically inadmissible
    points) contribute 0. The result is the maximum over the grid.
    """
    u = as_vector(u, "u")
    check_nonnegative(Err, "Err")
    grid = _ascending_grid(C_grid)
    m_grid = np.atleast_2d(np.asarray(m_grid, dtype=float))
    values = np.zeros(len(m_grid))
    for i, m in enumerate(m_grid):
        try:
            A = model.assemble(m)
        except PlaneIntersectsSurfaceError:
            continue
        B = whiten_operator(A, model.R)
        U, s, _ = np.linalg.svd(B.B, full_matrices=False)
        if s.size == 0 or s[0] == 0.0:
            continue
        keep = s > cfg.svd_rel_threshold * s[0]
        coeff = U[:, keep].T @ u
        s2 = s[keep] ** 2
        proj_resid = np.sqrt(max(float(u @ u) - float(coeff @ coeff), 0.0))
        if Err < proj_resid:
            continue
        # || A g_min(C) - pi(u) ||^2 along the grid, from the spectral filter
        dist_sq = np.array(
            [float(np.sum(coeff**2 * (c / (s2 + c)) ** 2)) for c in grid]
        )
        if np.any(np.diff(dist_sq) < -_MONOTONE_SLACK * max(float(u @ u), 1.0)):
            raise ValueError("discrepancy distance is not nondecreasing in C")
        ok = dist_sq <= Err**2
        if np.any(ok):
            values[i] = grid[np.flatnonzero(ok)[-1]]
    return GlobalDiscrepancyResult(
        C_bold=float(values.max(initial=0.0)),
        m_grid=m_grid,
        c_values=values,
        Err=float(Err),
    )


def minimize_f_C(
    model,
    u: np.ndarray,
    C_bold: float,
    starts,
    budget: int,
    bounds=None,
    objective=None,
    cfg: EvalConfig = EvalConfig(),
) -> MinimizeResult:
    """Multi-start Nelder-Mead minimization of the fixed-C functional.

        f(m) = ||A_m g_min - u||^2 + C_bold ||R g_min||^2

    One simplex search runs from each start, box-constrained to ``bounds``
    (the model's admissible box by default), sharing ``budget`` function
    evaluations equally. Returns the best point plus every local minimum
    sorted ascending, with a flag set when any search ran out of budget.

    ``objective`` replaces the default functional when given; used by
    sanity tests that need a known landscape.
    """
    check_positive(C_bold, "C_bold")
    starts = np.atleast_2d(np.asarray(starts, dtype=float))
    budget = check_count(budget, "budget")
    if bounds is None:
        bounds = getattr(model, "m_bounds", None)
    scipy_bounds = (
        scipy.optimize.Bounds(np.asarray(bounds)[:, 0], np.asarray(bounds)[:, 1])
        if bounds is not None
        else None
    )

    if objective is None:
        u = as_vector(u, "u")

        def objective(m):
            try:
                return _tikhonov_value(model, u, m, C_bold, cfg)
            except PlaneIntersectsSurfaceError:
                return np.inf

    per_start = max(budget // len(starts), 1)
    minima = []
    exhausted = False
    total_nfev = 0
    for x0 in starts:
        with np.errstate(invalid="ignore"):  # inf - inf inside NM when a start is inadmissible
            res = scipy.optimize.minimize(
                objective,
                x0,
                method="Nelder-Mead",
                bounds=scipy_bounds,
                options={"maxfev": per_start, "xatol": 1e-6, "fatol": 1e-12},
            )
        total_nfev += int(res.nfev)
        exhausted = exhausted or not res.success
        minima.append((float(res.fun), np.asarray(res.x, dtype=float)))
    minima.sort(key=lambda fm: fm[0])
    best_f, best_m = minima[0]
    return MinimizeResult(
        m_hat=best_m,
        f_value=best_f,
        local_minima=minima,
        budget_exhausted=exhausted,
        n_evaluations=total_nfev,
    )
