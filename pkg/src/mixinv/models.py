"""Forward-model constructions for the planar-source synthetic problem.

The measurement operator is a scalar point-source kernel decaying like
r^-2 between surface stations and source nodes lifted onto the plane
x3 = a*x1 + b*x2 + d. The geometry parameter m = (a, b, d/d_scale) is
kept in normalized coordinates so the admissible box is the unit cube;
``d_scale`` defaults to 100, matching the convention of reporting d/100.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .exceptions import DataError, PlaneIntersectsSurfaceError, ZeroDataError
from .linops import LinearOperator, RegularizerMatrix
from .validation import as_vector, check_box, check_count, check_nonnegative, check_positive

__all__ = [
    "SourceGrid",
    "ForwardModel",
    "GroundTruth",
    "Observation",
    "SlipBump",
    "station_layout",
    "make_R",
    "assemble_A",
    "synth_slip",
    "generate_observations",
    "dense_test_operator",
    "make_forward_model",
]


@dataclass(frozen=True)
class SourceGrid:
    """Regular nx-by-ny grid of source nodes in the horizontal plane."""

    x: np.ndarray          # (p,) node x1 coordinates
    y: np.ndarray          # (p,) node x2 coordinates
    areas: np.ndarray      # (p,) cell areas
    nx: int
    ny: int

    @property
    def p(self) -> int:
        return self.x.size


@dataclass(frozen=True)
class ForwardModel:
    """Geometry-parameterized forward map plus its fixed regularizer.

    ``param_scale`` maps the normalized parameter m to the physical plane
    coefficients (a, b, d) = m * param_scale. ``m_bounds`` is the admissible
    box for the normalized m.
    """

    stations: np.ndarray           # (n, 2) surface station coordinates
    grid: SourceGrid
    R: RegularizerMatrix
    m_bounds: np.ndarray           # (3, 2) normalized box
    param_scale: np.ndarray        # (3,) = (a_scale, b_scale, d_scale)
    decay_power: float = 2.0
    params: dict = field(default_factory=dict, compare=False)

    @property
    def n(self) -> int:
        return self.stations.shape[0]

    @property
    def p(self) -> int:
        return self.grid.p

    @property
    def q(self) -> int:
        return 3

    def physical_m(self, m: np.ndarray) -> np.ndarray:
        """Physical (a, b, d) for a normalized parameter vector."""
        return np.asarray(m, dtype=float) * self.param_scale

    def assemble(self, m: np.ndarray) -> LinearOperator:
        return assemble_A(self, m)


@dataclass(frozen=True)
class GroundTruth:
    """Synthetic truth: geometry, slip field, noise level, clean data."""

    m_true: np.ndarray
    g_true: np.ndarray
    sigma_true: float
    u_clean: np.ndarray


@dataclass(frozen=True)
class Observation:
    """Measurement vector with optional known noise level."""

    u: np.ndarray
    sigma_known: float | None = None
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        u = as_vector(self.u, "u")
        if np.linalg.norm(u) == 0.0:
            raise ZeroDataError("observation vector must be non-zero")
        object.__setattr__(self, "u", u)

    @property
    def n(self) -> int:
        return self.u.size


@dataclass(frozen=True)
class SlipBump:
    """Cosine-taper bump: amplitude at the center, zero beyond ``radius``."""

    x: float
    y: float
    radius: float
    amplitude: float = 1.0


def station_layout(n: int, extent: float) -> np.ndarray:
    """Deterministic sunflower layout of ``n`` stations on a disc.

    Golden-angle spirals spread points evenly without any RNG, so the
    layout is a pure function of (n, extent).
    """
    n = check_count(n, "n")
    extent = check_positive(extent, "extent")
    k = np.arange(1, n + 1)
    r = extent * np.sqrt((k - 0.5) / n)
    theta = k * np.pi * (3.0 - np.sqrt(5.0))
    return np.column_stack([r * np.cos(theta), r * np.sin(theta)])


def _regular_grid(nx: int, ny: int, extent: float) -> SourceGrid:
    dx = 2.0 * extent / nx
    dy = 2.0 * extent / ny
    xs = -extent + dx * (np.arange(nx) + 0.5)
    ys = -extent + dy * (np.arange(ny) + 0.5)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    p = nx * ny
    return SourceGrid(
        x=X.ravel(), y=Y.ravel(), areas=np.full(p, dx * dy), nx=nx, ny=ny
    )


def make_R(grid: SourceGrid, eps0: float = 1e-2) -> RegularizerMatrix:
    """Square invertible regularizer eps0*I + L on the source grid.

    L is the 5-point discrete Laplacian with zero-flux boundaries, i.e. the
    graph Laplacian of the grid, so it is positive semidefinite with the
    constant vector in its null space. Adding eps0*I makes R symmetric
    positive definite with smallest eigenvalue exactly eps0.
    """
    eps0 = check_positive(eps0, "eps0")

    def path_laplacian(k):
        if k == 1:
            return sp.csr_array((1, 1))
        main = np.full(k, 2.0)
        main[0] = main[-1] = 1.0
        off = -np.ones(k - 1)
        return sp.diags_array([off, main, off], offsets=[-1, 0, 1], format="csr")

    Tx = path_laplacian(grid.nx)
    Ty = path_laplacian(grid.ny)
    Ix = sp.identity(grid.nx, format="csr")
    Iy = sp.identity(grid.ny, format="csr")
    # node ordering matches _regular_grid: x-index major, y-index minor
    L = sp.kron(Tx, Iy) + sp.kron(Ix, Ty)
    R = eps0 * sp.identity(grid.p, format="csr") + L
    return RegularizerMatrix(R, structure="eps0*I + 5-point Laplacian (zero flux)")


def assemble_A(model: ForwardModel, m: np.ndarray) -> LinearOperator:
    """Assemble the n-by-p kernel matrix for geometry m (normalized).

    Source nodes are lifted onto the plane x3 = a*x1 + b*x2 + d; entry
    (i, j) is area_j / (4 pi r_ij^k) with r_ij the station-to-node distance
    and k the kernel decay power. Raises when any lifted node reaches the
    surface x3 >= 0.
    """
    m = as_vector(m, "m")
    if m.size != 3:
        raise ValueError(f"m must have 3 coordinates, got {m.size}")
    a, b, d = model.physical_m(m)
    z = a * model.grid.x + b * model.grid.y + d
    if np.any(z >= 0.0):
        raise PlaneIntersectsSurfaceError(
            f"plane x3 = {a:.4g}*x1 + {b:.4g}*x2 + {d:.4g} reaches the surface "
            f"(max lifted node height {z.max():.4g})"
        )
    dx = model.stations[:, 0:1] - model.grid.x[None, :]
    dy = model.stations[:, 1:2] - model.grid.y[None, :]
    dist_sq = dx * dx + dy * dy + z[None, :] ** 2
    entries = model.grid.areas[None, :] / (4.0 * np.pi * dist_sq ** (model.decay_power / 2.0))
    return LinearOperator(entries=entries)


def synth_slip(grid: SourceGrid, bumps: list[SlipBump]) -> np.ndarray:
    """Nonnegative slip field: a sum of cosine-taper bumps on the grid."""
    g = np.zeros(grid.p)
    x_lo, x_hi = grid.x.min(), grid.x.max()
    y_lo, y_hi = grid.y.min(), grid.y.max()
    for bump in bumps:
        if not (x_lo <= bump.x <= x_hi and y_lo <= bump.y <= y_hi):
            raise ValueError(f"bump center ({bump.x}, {bump.y}) outside grid footprint")
        check_positive(bump.radius, "radius")
        check_nonnegative(bump.amplitude, "amplitude")
        rho = np.hypot(grid.x - bump.x, grid.y - bump.y)
        inside = rho < bump.radius
        g[inside] += bump.amplitude * 0.5 * (1.0 + np.cos(np.pi * rho[inside] / bump.radius))
    return g


def generate_observations(
    model: ForwardModel,
    m_true: np.ndarray,
    g_true: np.ndarray,
    noise_ratio: float,
    rng: np.random.Generator,
) -> tuple[Observation, GroundTruth]:
    """Forward-map the truth and add white Gaussian noise.

    The noise level sigma is set so that sqrt(n) * sigma / ||u_clean||
    equals ``noise_ratio``; 0 produces an exact, noiseless observation.
    """
    noise_ratio = check_nonnegative(noise_ratio, "noise_ratio")
    m_true = as_vector(m_true, "m_true")
    g_true = as_vector(g_true, "g_true", allow_empty=False)
    A = assemble_A(model, m_true)
    if g_true.size != A.p:
        raise DataError(f"g_true has length {g_true.size}, expected {A.p}")
    u_clean = A.matvec(g_true)
    norm_clean = float(np.linalg.norm(u_clean))
    if norm_clean == 0.0 and noise_ratio > 0.0:
        raise DataError("clean signal is zero; cannot scale noise to it")
    n = u_clean.size
    sigma = noise_ratio * norm_clean / np.sqrt(n)
    u = u_clean + sigma * rng.standard_normal(n) if sigma > 0.0 else u_clean.copy()
    truth = GroundTruth(m_true=m_true, g_true=g_true, sigma_true=sigma, u_clean=u_clean)
    obs = Observation(
        u=u,
        sigma_known=sigma,
        provenance={"kind": "synthetic", "noise_ratio": noise_ratio},
    )
    return obs, truth


def dense_test_operator(seed: int, n: int, p: int, decay_rate: float) -> LinearOperator:
    """Random operator with prescribed geometric singular-value decay.

    A = U diag(s) V' with seeded random orthonormal factors and
    s_j = 10^(-decay_rate * (j - 1)), j = 1..n. Requires n <= p.
    """
    n = check_count(n, "n")
    p = check_count(p, "p")
    if n > p:
        raise ValueError(f"need n <= p, got n={n}, p={p}")
    check_nonnegative(decay_rate, "decay_rate")
    rng = np.random.default_rng(seed)
    U, _ = np.linalg.qr(rng.standard_normal((n, n)))
    V, _ = np.linalg.qr(rng.standard_normal((p, n)))
    s = 10.0 ** (-decay_rate * np.arange(n))
    return LinearOperator(entries=(U * s) @ V.T)


def make_forward_model(
    nx: int = 20,
    ny: int = 20,
    extent: float = 20.0,
    n_stations: int = 51,
    station_extent: float = 25.0,
    eps0: float = 1e-2,
    decay_power: float = 2.0,
    a_scale: float = 1.0,
    b_scale: float = 1.0,
    d_scale: float = 100.0,
    m_bounds=((-1.0, 1.0), (-1.0, 1.0), (-1.0, 1.0)),
) -> ForwardModel:
    """Build the default planar-source model on a regular grid.

    All arguments are plain numbers/tuples so the returned model can be
    reconstructed exactly from its ``params`` record.
    """
    params = {
        "nx": int(nx),
        "ny": int(ny),
        "extent": float(extent),
        "n_stations": int(n_stations),
        "station_extent": float(station_extent),
        "eps0": float(eps0),
        "decay_power": float(decay_power),
        "a_scale": float(a_scale),
        "b_scale": float(b_scale),
        "d_scale": float(d_scale),
        "m_bounds": [[float(lo), float(hi)] for lo, hi in m_bounds],
    }
    grid = _regular_grid(check_count(nx, "nx"), check_count(ny, "ny"), extent)
    return ForwardModel(
        stations=station_layout(n_stations, station_extent),
        grid=grid,
        R=make_R(grid, eps0),
        m_bounds=check_box(m_bounds, "m_bounds"),
        param_scale=np.array([a_scale, b_scale, d_scale], dtype=float),
        decay_power=float(decay_power),
        params=params,
    )
