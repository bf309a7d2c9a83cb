"""Regularized linear-algebra core.

Everything the density and the selection criteria need from the linear
part of the problem lives here: the whitened operator B = A R^-1, the
matrix-free Tikhonov normal-equation solver, truncated singular values,
the spectral log-determinant, and small dense oracles used by the test
suite to cross-check the fast paths.

All public functions are pure; factorizations are computed once at
construction time and never mutated afterwards, so concurrent callers
are safe.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .exceptions import SingularRegularizerError, SolverConvergenceError
from .validation import as_matrix, as_vector, check_positive

__all__ = [
    "LinearOperator",
    "RegularizerMatrix",
    "WhitenedOperator",
    "SpectralSummary",
    "whiten_operator",
    "solve_gmin",
    "solve_whitened",
    "truncated_singular_values",
    "log_det_whitened",
    "dense_det_oracle",
    "influence_residual",
]

#: Largest dimension accepted by the dense oracle helpers. Keeps tests from
#: silently exercising O(n^3) dense paths on production-sized operators.
DENSE_ORACLE_MAX_DIM = 64

DEFAULT_CG_TOL = 1e-10
DEFAULT_SVD_REL_THRESHOLD = 1e-10

# Rounding floor for the whitening consistency check, relative to column norms.
_WHITEN_CHECK_TOL = 1e-10


@dataclass(frozen=True)
class LinearOperator:
    """Dense n-by-p measurement operator."""

    entries: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "entries", as_matrix(self.entries, "entries"))

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @property
    def p(self) -> int:
        return self.entries.shape[1]

    def matvec(self, g: np.ndarray) -> np.ndarray:
        return self.entries @ g

    def rmatvec(self, v: np.ndarray) -> np.ndarray:
        return self.entries.T @ v


class RegularizerMatrix:
    """Sparse, square, certified-invertible regularizer R.

    A sparse LU factorization is computed once at construction and reused
    for every whitening solve; construction fails with
    :class:`SingularRegularizerError` when the factorization breaks down or
    the estimated smallest singular value is not safely positive.

    Parameters
    ----------
    matrix : sparse or dense square array
        The regularizer R.
    structure : str
        Free-form tag describing the sparsity pattern (metadata only).
    """

    def __init__(self, matrix, structure: str = "custom"):
        R = sp.csc_array(matrix)
        if R.shape[0] != R.shape[1]:
            raise ValueError(f"R must be square, got shape {R.shape}")
        if R.shape[0] < 1:
            raise ValueError("R must be at least 1x1")
        if not np.all(np.isfinite(R.data)):
            raise ValueError("R contains non-finite entries")
        self.matrix = R
        self.structure = structure
        self.p = R.shape[0]
        try:
            self._lu = splu(R)
        except RuntimeError as exc:  # SuperLU signals exact singularity here
            raise SingularRegularizerError(f"R factorization failed: {exc}") from exc
        # splu.solve is not documented as reentrant; serialize access.
        self._lock = threading.Lock()
        self.sigma_min, self.sigma_max = self._certify()

    def _certify(self, iters: int = 30) -> tuple[float, float]:
        """Estimate extreme singular values by power iteration.

        sigma_max via power iteration on R'R, sigma_min via inverse power
        iteration using the cached factorization. Raises when the smallest
        singular value estimate is not safely above the noise floor.
        """
        rng = np.random.default_rng(0)
        v = rng.standard_normal(self.p)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = self.matrix.T @ (self.matrix @ v)
            nw = np.linalg.norm(w)
            if nw == 0.0:
                raise SingularRegularizerError("R is the zero matrix")
            v = w / nw
        sigma_max = float(np.sqrt(v @ (self.matrix.T @ (self.matrix @ v))))

        v = rng.standard_normal(self.p)
        v /= np.linalg.norm(v)
        for _ in range(iters):
            w = self._lu.solve(self._lu.solve(v, trans="N"), trans="T")
            nw = np.linalg.norm(w)
            if not np.isfinite(nw) or nw == 0.0:
                raise SingularRegularizerError("inverse power iteration diverged")
            v = w / nw
        inv_norm_sq = float(v @ self._lu.solve(self._lu.solve(v, trans="N"), trans="T"))
        sigma_min = 1.0 / np.sqrt(inv_norm_sq)
        if not np.isfinite(sigma_min) or sigma_min <= 1e-12 * sigma_max:
            raise SingularRegularizerError(
                f"R invertibility certificate failed: sigma_min ~ {sigma_min:.3e}, "
                f"sigma_max ~ {sigma_max:.3e}"
            )
        return sigma_min, sigma_max

    @property
    def nnz(self) -> int:
        return int(self.matrix.nnz)

    def __getstate__(self):
        # the SuperLU handle and its lock cannot be pickled; refactorize on load
        return {"matrix": self.matrix, "structure": self.structure}

    def __setstate__(self, state):
        self.__init__(state["matrix"], structure=state["structure"])

    @classmethod
    def identity(cls, p: int) -> "RegularizerMatrix":
        return cls(sp.identity(p, format="csc"), structure="identity")

    def matvec(self, g: np.ndarray) -> np.ndarray:
        return self.matrix @ g

    def rmatvec(self, h: np.ndarray) -> np.ndarray:
        return self.matrix.T @ h

    def solve(self, b: np.ndarray) -> np.ndarray:
        """Solve R x = b (b may carry multiple right-hand sides as columns)."""
        with self._lock:
            return self._lu.solve(np.asarray(b, dtype=float), trans="N")

    def solve_t(self, b: np.ndarray) -> np.ndarray:
        """Solve R' x = b."""
        with self._lock:
            return self._lu.solve(np.asarray(b, dtype=float), trans="T")


@dataclass(frozen=True)
class WhitenedOperator:
    """Dense B = A R^-1 together with the pair it was built from."""

    B: np.ndarray
    operator: LinearOperator | None = None
    regularizer: RegularizerMatrix | None = None

    def __post_init__(self):
        object.__setattr__(self, "B", as_matrix(self.B, "B"))

    @property
    def n(self) -> int:
        return self.B.shape[0]

    @property
    def p(self) -> int:
        return self.B.shape[1]


@dataclass(frozen=True)
class SpectralSummary:
    """Descending singular values of B above a relative threshold."""

    singvals: np.ndarray
    rel_threshold: float

    def __post_init__(self):
        s = np.asarray(self.singvals, dtype=float)
        if s.size and (np.any(np.diff(s) > 0) or s[-1] <= 0):
            raise ValueError("singvals must be descending and strictly positive")
        object.__setattr__(self, "singvals", s)

    @property
    def rank(self) -> int:
        return int(self.singvals.size)


def whiten_operator(A: LinearOperator, R: RegularizerMatrix) -> WhitenedOperator:
    """Form B = A R^-1 by sparse triangular solves (never by inverting R).

    B R = A is equivalent to R' B' = A', which the cached factorization of R
    solves with all n rows of A as simultaneous right-hand sides. The result
    is verified column-wise: ||B R_col - A_col|| <= 1e-10 ||A_col|| (columns
    of A that vanish are checked against the largest column instead).
    """
    if R.p != A.p:
        raise ValueError(f"dimension mismatch: A is {A.n}x{A.p}, R is {R.p}x{R.p}")
    Bt = R.solve_t(A.entries.T)
    B = np.ascontiguousarray(Bt.T)

    resid = (R.matrix.T @ B.T).T - A.entries
    col_err = np.linalg.norm(resid, axis=0)
    col_scale = np.linalg.norm(A.entries, axis=0)
    floor = col_scale.max() if col_scale.max() > 0 else 1.0
    if np.any(col_err > _WHITEN_CHECK_TOL * np.maximum(col_scale, floor)):
        worst = float((col_err / np.maximum(col_scale, floor)).max())
        raise SingularRegularizerError(
            f"whitening consistency check failed: max column residual {worst:.3e}"
        )
    return WhitenedOperator(B=B, operator=A, regularizer=R)


def _cg_spd(apply_op, b: np.ndarray, tol: float, max_iter: int):
    """Conjugate gradients on a symmetric positive definite operator.

    Returns (x, iterations, relative true residual). Convergence is judged
    on the recursive residual and then confirmed on the true residual; one
    restart is attempted if rounding made the two disagree.
    """
    norm_b = np.linalg.norm(b)
    if norm_b == 0.0:
        return np.zeros_like(b), 0, 0.0

    x = np.zeros_like(b)
    total_iters = 0
    for _restart in range(2):
        r = b - apply_op(x) if total_iters else b.copy()
        p = r.copy()
        rs = float(r @ r)
        while total_iters < max_iter:
            if np.sqrt(rs) <= tol * norm_b:
                break
            Ap = apply_op(p)
            denom = float(p @ Ap)
            if denom <= 0.0:
                break  # loss of positive definiteness in rounding; re-check below
            alpha = rs / denom
            x = x + alpha * p
            r = r - alpha * Ap
            rs_new = float(r @ r)
            p = r + (rs_new / rs) * p
            rs = rs_new
            total_iters += 1
        true_rel = float(np.linalg.norm(b - apply_op(x)) / norm_b)
        if true_rel <= tol:
            return x, total_iters, true_rel
        if total_iters >= max_iter:
            break
    raise SolverConvergenceError(
        f"CG stalled at relative residual {true_rel:.3e} (target {tol:.1e}) "
        f"after {total_iters} iterations",
        iterations=total_iters,
        residual=true_rel,
    )


def solve_gmin(
    A: LinearOperator,
    R: RegularizerMatrix,
    C: float,
    u: np.ndarray,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
) -> np.ndarray:
    """Minimize ||A g - u||^2 + C ||R g||^2 via the normal equations.

    Solves (A'A + C R'R) g = A'u matrix-free: the operator application is
    composed of A, A', R, R' products and neither A'A nor R'R is ever
    materialized.
    """
    C = check_positive(C, "C")
    tol = check_positive(tol, "tol")
    u = as_vector(u, "u")
    if u.size != A.n:
        raise ValueError(f"u has length {u.size}, expected {A.n}")
    if max_iter is None:
        max_iter = 10 * A.p

    def apply_normal(g):
        return A.rmatvec(A.matvec(g)) + C * R.rmatvec(R.matvec(g))

    b = A.rmatvec(u)
    x, _, _ = _cg_spd(apply_normal, b, tol, max_iter)
    return x


def solve_whitened(
    B: WhitenedOperator,
    C: float,
    u: np.ndarray,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
) -> np.ndarray:
    """Solve (B'B + C I) x = B'u matrix-free.

    This is the whitened form of the Tikhonov normal equations; its spectrum
    is {s_j^2 + C} plus C, so CG converges in about rank(B) + 1 iterations
    regardless of how small C is.
    """
    C = check_positive(C, "C")
    u = as_vector(u, "u")
    if u.size != B.n:
        raise ValueError(f"u has length {u.size}, expected {B.n}")
    if max_iter is None:
        max_iter = 10 * B.p
    M = B.B

    def apply_op(x):
        return M.T @ (M @ x) + C * x

    b = M.T @ u
    x, _, _ = _cg_spd(apply_op, b, tol, max_iter)
    return x


def truncated_singular_values(
    B: WhitenedOperator, rel_threshold: float = DEFAULT_SVD_REL_THRESHOLD
) -> SpectralSummary:
    """Singular values of B exceeding ``rel_threshold`` times the largest.

    The zero operator yields an empty summary (rank 0).
    """
    if not (0.0 < rel_threshold < 1.0):
        raise ValueError(f"rel_threshold must lie in (0, 1), got {rel_threshold!r}")
    s = np.linalg.svd(B.B, compute_uv=False)
    if s.size == 0 or s[0] == 0.0:
        return SpectralSummary(singvals=np.empty(0), rel_threshold=rel_threshold)
    keep = s > rel_threshold * s[0]
    return SpectralSummary(singvals=s[keep], rel_threshold=rel_threshold)


def log_det_whitened(spec: SpectralSummary, C: float) -> float:
    """Return -1/2 log det(C^-1 B'B + I) from the singular values of B.

    Equals -1/2 sum_j log(1 + s_j^2 / C); an empty spectrum gives 0.
    """
    C = check_positive(C, "C")
    if spec.rank == 0:
        return 0.0
    return float(-0.5 * np.sum(np.log1p(spec.singvals**2 / C)))


def dense_det_oracle(B: np.ndarray, C: float) -> tuple[float, float, float]:
    """Evaluate the three equivalent determinant expressions densely.

    Returns ``(d1, d2, d3)`` with

        d1 = det(C^-1 B'B + I)^-1
        d2 = det(I - B'B (B'B + C I)^-1)
        d3 = det(I - B (B'B + C I)^-1 B')

    each evaluated exactly as written, by dense factorization of its own
    matrix. The inner subtractions in d2/d3 cancel to ~C/||B'B||, which
    costs float64 half its digits at extreme C, so the arithmetic runs in
    extended precision. Restricted to dimensions <= 64 so it can only
    serve as a test oracle.
    """
    import mpmath as mp

    B = as_matrix(B, "B")
    C = check_positive(C, "C")
    n, p = B.shape
    if max(n, p) > DENSE_ORACLE_MAX_DIM:
        raise ValueError(f"dense oracle limited to dimensions <= {DENSE_ORACLE_MAX_DIM}")
    with mp.workdps(40):
        Bm = mp.matrix(B.tolist())
        M = Bm.T * Bm
        Ip = mp.eye(p)
        In = mp.eye(n)
        d1 = 1 / mp.det(M / C + Ip)
        K_inv = (M + C * Ip) ** -1
        d2 = mp.det(Ip - M * K_inv)
        d3 = mp.det(In - Bm * K_inv * Bm.T)
        return float(d1), float(d2), float(d3)


def influence_residual(
    B: WhitenedOperator,
    spec: SpectralSummary,
    C: float,
    u: np.ndarray,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
) -> tuple[float, float, float]:
    """Quantities of the residual operator I - B B# with B# = (B'B+CI)^-1 B'.

    Returns ``(quad_form, trace, residual_norm_sq)`` where

        quad_form        = u'(I - B B#) u      (positive for u != 0)
        trace            = tr(I - B B#) = n - sum_j s_j^2/(s_j^2 + C)
        residual_norm_sq = ||(I - B B#) u||^2

    The trace is evaluated spectrally; the other two run through one
    matrix-free solve of (B'B + C I) x = B'u.
    """
    C = check_positive(C, "C")
    u = as_vector(u, "u")
    x = solve_whitened(B, C, u, tol=tol, max_iter=max_iter)
    resid_vec = u - B.B @ x
    quad_form = float(u @ resid_vec)
    s2 = spec.singvals**2
    trace = float(B.n - np.sum(s2 / (s2 + C)))
    residual_norm_sq = float(resid_vec @ resid_vec)
    return quad_form, trace, residual_norm_sq
