"""Three-stage adaptive Metropolis-Hastings, single-chain and parallel.

Stage 1 draws from the prior and forms importance-weighted moment
estimates, stage 2 runs random-walk MH with that fixed covariance, and
stage 3 (the bulk of the budget) adapts the proposal covariance from the
accumulated samples, mixing in a small fixed component for boundedness.

The parallel variant evaluates ``n_par`` proposals per iteration and
redistributes states through a row-stochastic transition matrix that is
reversible with respect to the pool weights.

Concurrency contract: the density evaluator must be pure and reentrant.
All randomness is drawn by the orchestrating thread in a fixed order;
worker threads only evaluate densities, so results are independent of
scheduling.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .exceptions import EvaluationError, NumericalError
from .validation import check_count, check_positive

__all__ = [
    "SamplerConfig",
    "RunningMoments",
    "TransitionMatrix",
    "ChainResult",
    "propose_gaussian",
    "mh_accept",
    "running_moments_update",
    "weighted_moments",
    "build_transition_matrix",
    "run_single_chain",
    "run_parallel_chain",
]

RW_SCALE_NUMERATOR = 2.38**2  # optimal random-walk scaling, divided by dimension


@dataclass(frozen=True)
class SamplerConfig:
    """Stage boundaries and proposal parameters.

    ``n1 < n2 < n3`` are cumulative per-chain sample counts for the three
    stages; the adaptive stage must dominate, ``n3 - n2 > max(n2 - n1, n1)``.
    ``scale`` defaults to 2.38^2 / dim at run time. ``jitter`` regularizes
    covariances relative to their mean diagonal (absolute fallback when the
    covariance is identically zero).
    """

    n1: int
    n2: int
    n3: int
    n_par: int = 20
    beta: float = 0.05
    scale: float | None = None
    seed: int = 0
    jitter: float = 1e-10
    transition_mode: str = "index-chain"   # or "per-paper"
    parallel: str = "serial"               # or "thread"

    def validate(self) -> "SamplerConfig":
        check_count(self.n1, "n1")
        if not self.n1 < self.n2 < self.n3:
            raise ValueError(f"need n1 < n2 < n3, got {self.n1}, {self.n2}, {self.n3}")
        if not (self.n3 - self.n2) > max(self.n2 - self.n1, self.n1):
            raise ValueError(
                "the adaptive stage must dominate: need n3 - n2 > max(n2 - n1, n1)"
            )
        check_count(self.n_par, "n_par")
        if not 0.0 < self.beta < 1.0:
            raise ValueError(f"beta must lie in (0, 1), got {self.beta}")
        if self.scale is not None:
            check_positive(self.scale, "scale")
        check_positive(self.jitter, "jitter")
        if self.transition_mode not in ("index-chain", "per-paper"):
            raise ValueError(f"unknown transition_mode {self.transition_mode!r}")
        if self.parallel not in ("serial", "thread"):
            raise ValueError(f"unknown parallel mode {self.parallel!r}")
        return self


@dataclass(frozen=True)
class RunningMoments:
    """Single-pass (Welford) mean and covariance accumulator."""

    count: int
    mean: np.ndarray
    m2: np.ndarray      # sum of outer products of deviations

    @classmethod
    def zero(cls, dim: int) -> "RunningMoments":
        return cls(count=0, mean=np.zeros(dim), m2=np.zeros((dim, dim)))

    @property
    def cov(self) -> np.ndarray:
        """Sample covariance (ddof=1); zeros until two samples arrive."""
        if self.count < 2:
            return np.zeros_like(self.m2)
        return self.m2 / (self.count - 1)

    def updated(self, x: np.ndarray) -> "RunningMoments":
        x = np.asarray(x, dtype=float)
        if x.shape != self.mean.shape:
            raise ValueError(f"sample has shape {x.shape}, expected {self.mean.shape}")
        k = self.count + 1
        delta = x - self.mean
        mean = self.mean + delta / k
        m2 = self.m2 + np.outer(delta, x - mean)
        return RunningMoments(count=k, mean=mean, m2=m2)


def running_moments_update(mom: RunningMoments, x: np.ndarray) -> RunningMoments:
    """Functional alias for :meth:`RunningMoments.updated`."""
    return mom.updated(x)


def weighted_moments(xs: np.ndarray, log_weights: np.ndarray):
    """Self-normalized importance mean and covariance.

    Weights are exp(log_weights) up to a common factor; -inf entries carry
    zero weight. Falls back to unweighted moments when every weight
    vanishes (a target with no mass found yet).
    """
    xs = np.asarray(xs, dtype=float)
    lw = np.asarray(log_weights, dtype=float)
    finite = np.isfinite(lw)
    if not np.any(finite):
        w = np.full(len(xs), 1.0 / len(xs))
    else:
        w = np.zeros(len(xs))
        w[finite] = np.exp(lw[finite] - lw[finite].max())
        w /= w.sum()
    mean = w @ xs
    dev = xs - mean
    cov = (w[:, None] * dev).T @ dev
    return mean, cov


@dataclass(frozen=True)
class TransitionMatrix:
    """Row-stochastic matrix reversible with respect to its weight vector."""

    T: np.ndarray
    w: np.ndarray


def build_transition_matrix(w: np.ndarray) -> TransitionMatrix:
    """Transition matrix of the multi-proposal accept/reject step.

    Off-diagonal entries are min(1, w_l / w_k) / N_par with the convention
    w_l / w_k = 0 whenever w_l = 0 (and = 1 when only w_k = 0); diagonals
    absorb the remainder. Requires w[0] > 0: the retained state must carry
    positive density.
    """
    w = np.asarray(w, dtype=float)
    if w.ndim != 1 or w.size < 2:
        raise ValueError("w must be a vector of at least 2 weights")
    if np.any(w < 0.0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and nonnegative")
    if w[0] <= 0.0:
        raise ValueError("w[0] must be positive: the current state has zero density")
    n_par = w.size - 1
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        ratio = np.minimum(1.0, w[None, :] / w[:, None])
    ratio[:, w == 0.0] = 0.0          # also clears 0/0 NaNs
    ratio[(w == 0.0)[:, None] & (w > 0.0)[None, :]] = 1.0
    T = ratio / n_par
    np.fill_diagonal(T, 0.0)
    np.fill_diagonal(T, np.maximum(0.0, 1.0 - T.sum(axis=1)))
    return TransitionMatrix(T=T, w=w)


def _transition_from_log_weights(lw: np.ndarray) -> TransitionMatrix:
    """Build the transition matrix from log weights without underflow.

    Equivalent to ``build_transition_matrix(exp(lw))`` up to the overall
    weight scale, but safe when log densities in the pool differ by more
    than the exp range: ratios are formed as exp(lw_l - lw_k) directly.
    """
    lw = np.asarray(lw, dtype=float)
    if not np.isfinite(lw[0]):
        raise ValueError("current state log weight must be finite")
    n_par = lw.size - 1
    with np.errstate(over="ignore", invalid="ignore"):
        ratio = np.exp(np.minimum(lw[None, :] - lw[:, None], 0.0))
    ratio[:, lw == -np.inf] = 0.0      # zero-density targets, incl. nan from -inf - -inf
    T = ratio / n_par
    np.fill_diagonal(T, 0.0)
    np.fill_diagonal(T, np.maximum(0.0, 1.0 - T.sum(axis=1)))
    with np.errstate(under="ignore"):
        w = np.exp(lw - lw[np.isfinite(lw)].max())
    return TransitionMatrix(T=T, w=w)


def _jittered(S: np.ndarray, jitter: float) -> np.ndarray:
    """Symmetrize and add jitter relative to the mean diagonal."""
    S = 0.5 * (S + S.T)
    d = S.shape[0]
    tr = float(np.trace(S))
    lam = jitter * (tr / d) if tr > 0.0 else jitter
    return S + lam * np.eye(d)


def propose_gaussian(
    center: np.ndarray,
    Sigma: np.ndarray,
    Sigma0: np.ndarray,
    beta: float,
    scale: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Draw from the two-component Gaussian mixture around ``center``.

    With probability 1 - beta the adaptive covariance ``Sigma`` is used,
    otherwise the fixed ``Sigma0``; both are scaled by ``scale``. The
    covariances must already be jittered: a factorization failure here is
    a configuration bug, not a recoverable condition.
    """
    use_fixed = rng.random() < beta
    S = Sigma0 if use_fixed else Sigma
    try:
        chol = np.linalg.cholesky(scale * S)
    except np.linalg.LinAlgError as exc:
        raise ValueError(
            "proposal covariance is not positive definite after jitter"
        ) from exc
    return center + chol @ rng.standard_normal(len(center))


def mh_accept(log_r_current: float, log_r_proposal: float, rng: np.random.Generator) -> bool:
    """Metropolis accept/reject on log densities.

    Accepts iff log(U) < log_r_proposal - log_r_current with U ~ U(0, 1);
    a -inf proposal is never accepted. One uniform is consumed on every
    call so the random stream does not depend on the outcome.
    """
    if not np.isfinite(log_r_current):
        raise ValueError(f"current state log density must be finite, got {log_r_current}")
    if math.isnan(log_r_proposal):
        raise ValueError("proposal log density is NaN")
    u = rng.random()
    if log_r_proposal == -np.inf:
        return False
    if log_r_proposal >= log_r_current:
        return True
    if u == 0.0:
        return True
    return math.log(u) < log_r_proposal - log_r_current


@dataclass(frozen=True)
class ChainResult:
    """Flat sample history with stage boundaries and diagnostics.

    ``states`` has one row per retained sample (iteration-major, column-
    minor for the parallel sampler). ``aux`` carries whatever auxiliary
    payload the density evaluator returned alongside each log density.
    Stage 1 has no accept/reject step; its acceptance rate is 1 by
    convention.
    """

    states: np.ndarray
    log_densities: np.ndarray
    aux: list
    stage_marks: tuple[int, int, int]
    acceptance_rates: tuple[float, float, float]
    moments: RunningMoments
    config: SamplerConfig


def _evaluate(evaluator, x: np.ndarray):
    """Normalize evaluator output to (log density, aux payload)."""
    out = evaluator(x)
    if isinstance(out, tuple):
        logp, aux = out
    else:
        logp, aux = out, None
    return float(logp), aux


class _Recorder:
    """Accumulates samples and the unweighted running moments."""

    def __init__(self, dim: int):
        self.states: list[np.ndarray] = []
        self.log_densities: list[float] = []
        self.aux: list = []
        self.moments = RunningMoments.zero(dim)

    def add(self, x: np.ndarray, logp: float, aux) -> None:
        self.states.append(np.asarray(x, dtype=float))
        self.log_densities.append(float(logp))
        self.aux.append(aux)
        self.moments = self.moments.updated(x)

    def __len__(self) -> int:
        return len(self.states)

    def best_finite(self):
        lp = np.asarray(self.log_densities)
        if not np.any(np.isfinite(lp)):
            raise NumericalError(
                "no state with positive density found; check the prior support"
            )
        idx = int(np.nanargmax(np.where(np.isfinite(lp), lp, -np.inf)))
        return self.states[idx], self.log_densities[idx], self.aux[idx]


def _guarded_eval(evaluator, x, position):
    try:
        return _evaluate(evaluator, x)
    except Exception as exc:
        raise EvaluationError(
            f"density evaluation failed at chain position {position}: {exc}",
            position=position,
        ) from exc


def run_single_chain(
    cfg: SamplerConfig,
    evaluator,
    prior_sampler,
    rng: np.random.Generator | None = None,
) -> ChainResult:
    """Run the three-stage single-chain sampler.

    ``evaluator`` maps a state vector to a log density (optionally a
    (log density, aux) pair); ``prior_sampler`` maps an rng to one state
    vector. Stage 1 estimates moments by importance weighting the prior
    draws with their densities; stages 2 and 3 start from the current
    mean estimate (falling back to the best sample seen if that point has
    zero density).
    """
    cfg = cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    first = prior_sampler(rng)
    dim = len(first)
    scale = cfg.scale if cfg.scale is not None else RW_SCALE_NUMERATOR / dim
    rec = _Recorder(dim)

    # stage 1: prior draws, importance-weighted moment estimates
    logp, aux = _guarded_eval(evaluator, first, 0)
    rec.add(first, logp, aux)
    for j in range(1, cfg.n1):
        x = prior_sampler(rng)
        logp, aux = _guarded_eval(evaluator, x, j)
        rec.add(x, logp, aux)
    stage1_states = np.asarray(rec.states)
    stage1_logp = np.asarray(rec.log_densities)
    mean1, cov1 = weighted_moments(stage1_states, stage1_logp)

    def start_point(mean_estimate):
        logp, aux = _guarded_eval(evaluator, mean_estimate, len(rec))
        if np.isfinite(logp):
            return np.asarray(mean_estimate, dtype=float), logp, aux
        return rec.best_finite()

    # Moments that drive the adaptive proposal accumulate chain samples from
    # stage 2 on. Raw stage-1 prior draws stay out: their spread reflects the
    # prior box, not the target, and a fixed fraction of them would keep the
    # adapted covariance inflated (and acceptance near zero) forever. Stage-1
    # information enters through the weighted estimates that seed stage 2.
    adapt = RunningMoments.zero(dim)

    # stage 2: fixed-covariance random walk from the stage-1 mean
    x, logp, aux = start_point(mean1)
    rec.add(x, logp, aux)
    adapt = adapt.updated(x)
    sigma_fixed = _jittered(cov1, cfg.jitter)
    accepts2 = 0
    iters2 = cfg.n2 - cfg.n1 - 1
    for _ in range(iters2):
        prop = propose_gaussian(x, sigma_fixed, sigma_fixed, 0.0, scale, rng)
        logp_prop, aux_prop = _guarded_eval(evaluator, prop, len(rec))
        if mh_accept(logp, logp_prop, rng):
            x, logp, aux = prop, logp_prop, aux_prop
            accepts2 += 1
        rec.add(x, logp, aux)
        adapt = adapt.updated(x)

    # stage 3: adaptive covariance with a small fixed mixture component
    cov2 = adapt.cov
    if np.trace(cov2) == 0.0:  # stage 2 never moved; fall back to the stage-1 spread
        cov2 = cov1
    sigma0 = _jittered(cov2, cfg.jitter)
    x, logp, aux = start_point(adapt.mean)
    rec.add(x, logp, aux)
    adapt = adapt.updated(x)
    accepts3 = 0
    iters3 = cfg.n3 - cfg.n2 - 1
    for _ in range(iters3):
        sigma = _jittered(adapt.cov, cfg.jitter)
        prop = propose_gaussian(x, sigma, sigma0, cfg.beta, scale, rng)
        logp_prop, aux_prop = _guarded_eval(evaluator, prop, len(rec))
        if mh_accept(logp, logp_prop, rng):
            x, logp, aux = prop, logp_prop, aux_prop
            accepts3 += 1
        rec.add(x, logp, aux)
        adapt = adapt.updated(x)

    return ChainResult(
        states=np.asarray(rec.states),
        log_densities=np.asarray(rec.log_densities),
        aux=rec.aux,
        stage_marks=(0, cfg.n1, cfg.n2),
        acceptance_rates=(
            1.0,
            accepts2 / iters2 if iters2 else 1.0,
            accepts3 / iters3 if iters3 else 1.0,
        ),
        moments=rec.moments,
        config=cfg,
    )


def _select_columns(tm: TransitionMatrix, mode: str, n_par: int, rng: np.random.Generator):
    """Draw the pool index for each output column from the transition matrix.

    Index-chain mode (default) walks the finite-state chain starting at the
    retained state, one step per column. The literal per-paper mode draws
    column k from row k independently; a draw landing on a zero-weight pool
    member (only reachable through the degenerate diagonal of an all-zero
    row pair) is treated as a rejection, keeping retained states at
    positive density.
    """
    T = tm.T
    cum = np.cumsum(T, axis=1)
    last = T.shape[0] - 1
    indices = np.empty(n_par, dtype=int)
    if mode == "index-chain":
        i = 0
        for k in range(n_par):
            i = min(int(np.searchsorted(cum[i], rng.random(), side="right")), last)
            indices[k] = i
    else:
        for k in range(n_par):
            idx = min(int(np.searchsorted(cum[k], rng.random(), side="right")), last)
            indices[k] = idx if tm.w[idx] > 0.0 else 0
    return indices


def run_parallel_chain(
    cfg: SamplerConfig,
    evaluator,
    prior_sampler,
    rng: np.random.Generator | None = None,
) -> ChainResult:
    """Run the three-stage sampler with ``n_par`` proposals per iteration.

    Each iteration proposes a pool of candidates, evaluates them
    concurrently, and redistributes all columns through the transition
    matrix built from the pool weights (previous retained state first,
    then the proposals). The default pool is exchangeable (candidates
    i.i.d. around a latent center stepped from the retained state), which
    is what makes the density-only weights exact; ``per-paper`` mode
    centers each candidate at its own column's previous state instead.
    With ``n_par=1`` the default reduces to ordinary Metropolis-Hastings.
    """
    cfg = cfg.validate()
    if rng is None:
        rng = np.random.default_rng(cfg.seed)
    n_par = cfg.n_par

    pool_executor = None
    if cfg.parallel == "thread" and n_par > 1:
        pool_executor = ThreadPoolExecutor(max_workers=n_par)

    def eval_batch(states, position):
        if pool_executor is not None:
            futures = [pool_executor.submit(evaluator, x) for x in states]
            out = []
            for k, f in enumerate(futures):
                try:
                    r = f.result()
                except Exception as exc:
                    raise EvaluationError(
                        f"density evaluation failed at chain position {position + k}: {exc}",
                        position=position + k,
                    ) from exc
                lp, aux = r if isinstance(r, tuple) else (r, None)
                out.append((float(lp), aux))
            return out
        return [_guarded_eval(evaluator, x, position + k) for k, x in enumerate(states)]

    try:
        first = prior_sampler(rng)
        dim = len(first)
        scale = cfg.scale if cfg.scale is not None else RW_SCALE_NUMERATOR / dim
        rec = _Recorder(dim)

        # stage 1: n1 iterations of n_par independent prior draws
        draws = [first] + [prior_sampler(rng) for _ in range(n_par - 1)]
        for j in range(cfg.n1):
            if j > 0:
                draws = [prior_sampler(rng) for _ in range(n_par)]
            results = eval_batch(draws, len(rec))
            for x, (logp, aux) in zip(draws, results):
                rec.add(x, logp, aux)
        mean1, cov1 = weighted_moments(
            np.asarray(rec.states), np.asarray(rec.log_densities)
        )

        # Adaptive-proposal moments over chain samples (stage 2 on); see the
        # matching comment in run_single_chain for why prior draws stay out.
        adapt = RunningMoments.zero(dim)

        def start_columns(mean_estimate):
            nonlocal adapt
            logp, aux = _guarded_eval(evaluator, mean_estimate, len(rec))
            if not np.isfinite(logp):
                mean_estimate, logp, aux = rec.best_finite()
            cols = [np.asarray(mean_estimate, dtype=float)] * n_par
            for x in cols:
                rec.add(x, logp, aux)
                adapt = adapt.updated(x)
            return cols, [logp] * n_par, [aux] * n_par

        def exchangeable_pool(sigma, sigma0, beta):
            """Proposals i.i.d. around a latent center stepped from the
            retained state.

            Both half-steps share one covariance draw, which makes the pool
            exchangeable with the retained state; that is what licenses the
            density-only weights of the transition matrix. Centering each
            proposal at its own column instead (the literal reading, kept in
            per-paper mode) breaks exchangeability and visibly shrinks the
            sampled covariance. The half scale keeps the net state-to-proposal
            kernel at the usual random-walk covariance.
            """
            use_fixed = rng.random() < beta
            S = sigma0 if use_fixed else sigma
            try:
                chol = np.linalg.cholesky(0.5 * scale * S)
            except np.linalg.LinAlgError as exc:
                raise ValueError(
                    "proposal covariance is not positive definite after jitter"
                ) from exc
            center = cols[-1] + chol @ rng.standard_normal(dim)
            return [center + chol @ rng.standard_normal(dim) for _ in range(n_par)]

        def stage_iterations(n_iters, propose_pool):
            nonlocal cols, col_logp, col_aux, adapt
            accepts = 0
            for _ in range(n_iters):
                props = propose_pool()
                results = eval_batch(props, len(rec))
                pool = [cols[-1]] + props
                pool_logp = [col_logp[-1]] + [lp for lp, _ in results]
                pool_aux = [col_aux[-1]] + [aux for _, aux in results]
                tm = _transition_from_log_weights(np.asarray(pool_logp))
                chosen = _select_columns(tm, cfg.transition_mode, n_par, rng)
                accepts += int(np.count_nonzero(chosen != 0))
                cols = [pool[i] for i in chosen]
                col_logp = [pool_logp[i] for i in chosen]
                col_aux = [pool_aux[i] for i in chosen]
                for x, lp, aux in zip(cols, col_logp, col_aux):
                    rec.add(x, lp, aux)
                    adapt = adapt.updated(x)
            return accepts

        def pool_maker(sigma_fn, sigma0, beta):
            if cfg.transition_mode == "per-paper":
                return lambda: [
                    propose_gaussian(c, sigma_fn(), sigma0, beta, scale, rng) for c in cols
                ]
            return lambda: exchangeable_pool(sigma_fn(), sigma0, beta)

        # stage 2: fixed covariance
        cols, col_logp, col_aux = start_columns(mean1)
        sigma_fixed = _jittered(cov1, cfg.jitter)
        iters2 = cfg.n2 - cfg.n1 - 1
        accepts2 = stage_iterations(
            iters2, pool_maker(lambda: sigma_fixed, sigma_fixed, 0.0)
        )

        # stage 3: adaptive covariance, beta-mixture proposals
        cov2 = adapt.cov
        if np.trace(cov2) == 0.0:  # stage 2 never moved
            cov2 = cov1
        sigma0 = _jittered(cov2, cfg.jitter)
        cols, col_logp, col_aux = start_columns(adapt.mean)
        iters3 = cfg.n3 - cfg.n2 - 1
        accepts3 = stage_iterations(
            iters3,
            pool_maker(lambda: _jittered(adapt.cov, cfg.jitter), sigma0, cfg.beta),
        )
    finally:
        if pool_executor is not None:
            pool_executor.shutdown(wait=False)

    total2 = iters2 * n_par
    total3 = iters3 * n_par
    return ChainResult(
        states=np.asarray(rec.states),
        log_densities=np.asarray(rec.log_densities),
        aux=rec.aux,
        stage_marks=(0, cfg.n1 * n_par, cfg.n2 * n_par),
        acceptance_rates=(
            1.0,
            accepts2 / total2 if total2 else 1.0,
            accepts3 / total3 if total3 else 1.0,
        ),
        moments=rec.moments,
        config=cfg,
    )
