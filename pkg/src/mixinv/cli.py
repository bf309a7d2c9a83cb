"""Batch front-end: generate, invert, baseline, diagnose.

Runs are driven by a YAML config with nested blocks (problem / truth /
prior / sampler / solver / baseline / io); a commented example ships in
``docs/example-config.yaml``. Every run is seeded from the config (or
``--seed``), never from the clock, so identical config + seed reproduce
byte-identical outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np
import yaml

from . import chainio
from .exceptions import (
    ConfigError,
    DataError,
    MixinvError,
    NumericalError,
    PlaneIntersectsSurfaceError,
)
from .linops import truncated_singular_values, whiten_operator
from .models import (
    Observation,
    SlipBump,
    generate_observations,
    make_forward_model,
    synth_slip,
)
from .posterior import EvalConfig, PriorSpec, make_posterior_evaluator
from .regselect import (
    default_c_grid,
    gcv_score,
    global_discrepancy,
    minimize_f_C,
    pointwise_objective,
)
from .sampler import SamplerConfig, run_parallel_chain, run_single_chain

__all__ = ["main", "cmd_generate", "cmd_invert", "cmd_baseline", "cmd_diagnose"]

BASELINE_METHODS = ("gcv-pointwise", "gcv-global", "cls-pointwise", "cls-global")


class _Config:
    """Dict wrapper that raises ConfigError with dotted field paths."""

    def __init__(self, data: dict, digest: str):
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping of blocks")
        self.data = data
        self.digest = digest

    def get(self, path: str, default=None, required: bool = False, cast=None):
        node = self.data
        for part in path.split("."):
            if not isinstance(node, dict) or part not in node:
                if required:
                    raise ConfigError(f"missing required config field {path!r}")
                return default
            node = node[part]
        if node is None:
            if required:
                raise ConfigError(f"config field {path!r} must not be null")
            return default
        if cast is not None:
            try:
                return cast(node)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"config field {path!r}: {exc}") from exc
        return node


def load_config(path) -> _Config:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(raw)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} failed to parse: {exc}") from exc
    digest = "sha256:" + hashlib.sha256(raw).hexdigest()
    return _Config(data if data is not None else {}, digest)


def _model_from_config(cfg: _Config):
    return make_forward_model(
        nx=cfg.get("problem.nx", 20, cast=int),
        ny=cfg.get("problem.ny", 20, cast=int),
        extent=cfg.get("problem.extent", 20.0, cast=float),
        n_stations=cfg.get("problem.n_stations", 51, cast=int),
        station_extent=cfg.get("problem.station_extent", 25.0, cast=float),
        eps0=cfg.get("problem.eps0", 1e-2, cast=float),
        decay_power=cfg.get("problem.decay_power", 2.0, cast=float),
        a_scale=cfg.get("problem.a_scale", 1.0, cast=float),
        b_scale=cfg.get("problem.b_scale", 1.0, cast=float),
        d_scale=cfg.get("problem.d_scale", 100.0, cast=float),
        m_bounds=cfg.get("problem.m_bounds", ((-1, 1), (-1, 1), (-1, 1))),
    )


def _prior_from_config(cfg: _Config, model) -> PriorSpec:
    m_box = cfg.get("prior.m_box", model.m_bounds)
    logc = cfg.get("prior.logc_range", (-8.0, 2.0))
    try:
        return PriorSpec(m_box=np.asarray(m_box, dtype=float), logC_range=tuple(logc))
    except ValueError as exc:
        raise ConfigError(f"prior block invalid: {exc}") from exc


def _eval_config(cfg: _Config) -> EvalConfig:
    max_iter = cfg.get("solver.cg_max_iter")
    return EvalConfig(
        cg_tol=cfg.get("solver.cg_tol", 1e-10, cast=float),
        cg_max_iter=int(max_iter) if max_iter is not None else None,
        svd_rel_threshold=cfg.get("solver.svd_rel_threshold", 1e-10, cast=float),
    )


def _seed(cfg: _Config, override) -> int:
    if override is not None:
        return int(override)
    seed = cfg.get("io.seed")
    if seed is None:
        raise ConfigError("io.seed is required (runs are never clock-seeded)")
    return int(seed)


def _out_dir(cfg: _Config, override) -> Path:
    out = override if override is not None else cfg.get("io.out_dir", required=True)
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_json(path: Path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def _read_json(path: Path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as f:
            return json.load(f)
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from exc


def cmd_generate(config_path, out=None, seed=None) -> int:
    """Write model description, ground truth, and observation files."""
    cfg = load_config(config_path)
    out_dir = _out_dir(cfg, out)
    seed_val = _seed(cfg, seed)
    model = _model_from_config(cfg)

    m_true = np.asarray(cfg.get("truth.m", required=True), dtype=float)
    bump_specs = cfg.get("truth.bumps", required=True)
    try:
        bumps = [SlipBump(**b) for b in bump_specs]
    except TypeError as exc:
        raise ConfigError(f"truth.bumps entries invalid: {exc}") from exc
    noise_ratio = cfg.get("truth.noise_ratio", 0.05, cast=float)

    g_true = synth_slip(model.grid, bumps)
    rng = np.random.default_rng(seed_val)
    obs, truth = generate_observations(model, m_true, g_true, noise_ratio, rng)

    _write_json(out_dir / "model.json", {"kind": "planar-source", "params": model.params})
    _write_json(
        out_dir / "truth.json",
        {
            "m_true": truth.m_true.tolist(),
            "g_true": truth.g_true.tolist(),
            "sigma_true": truth.sigma_true,
            "u_clean": truth.u_clean.tolist(),
        },
    )
    _write_json(
        out_dir / "observation.json",
        {
            "u": obs.u.tolist(),
            "sigma_known": obs.sigma_known,
            "provenance": dict(obs.provenance, seed=seed_val),
        },
    )
    realized = float(
        np.linalg.norm(obs.u - truth.u_clean) / max(np.linalg.norm(truth.u_clean), 1e-300)
    )
    print(f"generated n={obs.n} measurements, p={model.p} unknowns -> {out_dir}")
    print(f"noise ratio: configured {noise_ratio:.6g}, realized {realized:.6g}")
    return 0


def _load_data(cfg: _Config):
    """Read the generated data files.

    Looks in io.data_dir, falling back to the configured io.out_dir; an
    --out override redirects outputs only, never the data source.
    """
    data_dir = Path(cfg.get("io.data_dir") or cfg.get("io.out_dir", required=True))
    model_doc = _read_json(data_dir / "model.json")
    obs_doc = _read_json(data_dir / "observation.json")
    try:
        model = make_forward_model(**model_doc["params"])
    except (KeyError, TypeError) as exc:
        raise DataError(f"model.json is malformed: {exc}") from exc
    try:
        obs = Observation(
            u=np.asarray(obs_doc["u"], dtype=float),
            sigma_known=obs_doc.get("sigma_known"),
            provenance=obs_doc.get("provenance", {}),
        )
    except (KeyError, ValueError) as exc:
        raise DataError(f"observation.json is malformed: {exc}") from exc
    config_model = _model_from_config(cfg)
    if config_model.params != model.params:
        raise DataError("model.json disagrees with the config problem block")
    if obs.n != model.n:
        raise DataError(
            f"observation has {obs.n} measurements but the model defines {model.n}"
        )
    return model, obs


def cmd_invert(config_path, out=None, seed=None, n_par=None) -> int:
    """Run the Bayesian inversion and persist chain, series, and report."""
    cfg = load_config(config_path)
    out_dir = _out_dir(cfg, out)
    seed_val = _seed(cfg, seed)
    model, obs = _load_data(cfg)
    prior = _prior_from_config(cfg, model)
    eval_cfg = _eval_config(cfg)

    scale = cfg.get("sampler.scale")
    sampler_cfg = SamplerConfig(
        n1=cfg.get("sampler.n1", 200, cast=int),
        n2=cfg.get("sampler.n2", 400, cast=int),
        n3=cfg.get("sampler.n3", 4000, cast=int),
        n_par=int(n_par) if n_par is not None else cfg.get("sampler.n_par", 20, cast=int),
        beta=cfg.get("sampler.beta", 0.05, cast=float),
        scale=float(scale) if scale is not None else None,
        seed=seed_val,
        jitter=cfg.get("sampler.jitter", 1e-10, cast=float),
        transition_mode=cfg.get("sampler.transition_mode", "index-chain"),
        parallel=cfg.get("sampler.parallel", "thread"),
    )
    try:
        sampler_cfg.validate()
    except ValueError as exc:
        raise ConfigError(f"sampler block invalid: {exc}") from exc

    evaluator = make_posterior_evaluator(model, obs, prior, eval_cfg)
    rng = np.random.default_rng(seed_val)
    t0 = time.perf_counter()
    if sampler_cfg.n_par == 1:
        result = run_single_chain(sampler_cfg, evaluator, prior.sample, rng)
    else:
        result = run_parallel_chain(sampler_cfg, evaluator, prior.sample, rng)
    wall = time.perf_counter() - t0

    sigma_max_sq = np.array(
        [ev.sigma_max_sq if ev is not None else np.nan for ev in result.aux]
    )
    meta = {
        "q": model.q,
        "n_par": sampler_cfg.n_par,
        "seed": seed_val,
        "a_scale": model.param_scale[0],
        "b_scale": model.param_scale[1],
        "d_scale": model.param_scale[2],
        "logc_lo": prior.logC_range[0],
        "logc_hi": prior.logC_range[1],
        "stage_marks": result.stage_marks,
        "acceptance": list(result.acceptance_rates),
        "config_digest": cfg.digest,
    }
    chain_path = out_dir / "chain.csv"
    chainio.write_chain(chain_path, result.states, result.log_densities, sigma_max_sq, meta)
    records = chainio.read_chain(chain_path)
    chainio.write_series(out_dir / "series.csv", records)
    report = dataclasses.replace(
        chainio.summarize(records, stage=3), wall_time=wall, config_digest=cfg.digest
    )
    chainio.write_report(out_dir / "report.json", out_dir / "report.txt", report)
    print(report.to_text(), end="")
    print(f"chain -> {chain_path}")
    return 0


def _baseline_grids(cfg: _Config, model, prior: PriorSpec):
    c_grid = default_c_grid(
        num=cfg.get("baseline.c_grid.num", 100, cast=int),
        lo=cfg.get("baseline.c_grid.lo", 1e-8, cast=float),
        hi=cfg.get("baseline.c_grid.hi", 1e2, cast=float),
    )
    n_axis = cfg.get("baseline.m_grid_points", 7, cast=int)
    axes = [np.linspace(lo, hi, n_axis) for lo, hi in prior.m_box]
    mesh = np.meshgrid(*axes, indexing="ij")
    m_grid = np.column_stack([g.ravel() for g in mesh])
    return c_grid, m_grid


def _baseline_starts(cfg: _Config, prior: PriorSpec, seed: int):
    n_starts = cfg.get("baseline.n_starts", 8, cast=int)
    rng = np.random.default_rng(seed)
    return rng.uniform(
        prior.m_box[:, 0], prior.m_box[:, 1], size=(n_starts, prior.q)
    )


def _write_table(path: Path, columns, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join("%.17g" % v if isinstance(v, float) else str(v) for v in row))
            f.write("\n")


def cmd_baseline(config_path, method, out=None, seed=None) -> int:
    """Run one deterministic comparison method and emit its table/trace."""
    if method not in BASELINE_METHODS:
        raise ConfigError(f"method must be one of {BASELINE_METHODS}, got {method!r}")
    cfg = load_config(config_path)
    out_dir = _out_dir(cfg, out)
    seed_val = _seed(cfg, seed)
    model, obs = _load_data(cfg)
    prior = _prior_from_config(cfg, model)
    eval_cfg = _eval_config(cfg)
    c_grid, m_grid = _baseline_grids(cfg, model, prior)
    starts = _baseline_starts(cfg, prior, seed_val)
    budget = cfg.get("baseline.budget", 4000, cast=int)
    u = obs.u
    scales = model.param_scale

    if method == "cls-global":
        err_ratios = [float(r) for r in cfg.get("baseline.err_ratios", (0.2, 0.1, 0.05, 0.01))]
        norm_u = float(np.linalg.norm(u))
        rows = []
        for ratio in err_ratios:
            gd = global_discrepancy(model, u, ratio * norm_u, m_grid, c_grid, eval_cfg)
            if gd.C_bold > 0.0:
                mm = minimize_f_C(model, u, gd.C_bold, starts, budget, cfg=eval_cfg)
                a, b, d = np.asarray(mm.m_hat) * scales
                if mm.budget_exhausted:
                    print(f"warning: Err/||u||={ratio:g}: search budget exhausted")
                rows.append((ratio, gd.C_bold, float(a), float(b), float(d)))
            else:
                print(f"warning: Err/||u||={ratio:g}: no admissible C on the grid")
                rows.append((ratio, 0.0, float("nan"), float("nan"), float("nan")))
        columns = ("err_over_norm_u", "C", "a", "b", "d")
        table_path = out_dir / f"baseline_{method}.csv"
        _write_table(table_path, columns, rows)
        print(",".join(columns))
        for row in rows:
            print(",".join(f"{v:.6g}" for v in row))
        print(f"table -> {table_path}")
        return 0

    # pointwise / global objective methods: multi-start search with a trace
    trace = []

    if method in ("gcv-pointwise", "cls-pointwise"):
        crit = "GCV" if method == "gcv-pointwise" else "CLS"
        sigma = obs.sigma_known
        if crit == "CLS" and sigma is None:
            raise DataError("cls-pointwise requires a known noise level in the observation")

        def objective(m):
            value = pointwise_objective(m, crit, model, u, c_grid, sigma=sigma, cfg=eval_cfg)
            trace.append((np.array(m, dtype=float), float(value)))
            return value

    else:  # gcv-global: joint minimization of the GCV score over (m, C-grid)

        def objective(m):
            try:
                A = model.assemble(m)
            except PlaneIntersectsSurfaceError:
                trace.append((np.array(m, dtype=float), float("inf")))
                return float("inf")
            B = whiten_operator(A, model.R)
            spec = truncated_singular_values(B, eval_cfg.svd_rel_threshold)
            value = min(gcv_score(B, spec, c, u) for c in c_grid)
            trace.append((np.array(m, dtype=float), float(value)))
            return float(value)

    mm = minimize_f_C(
        model, u, 1.0, starts, budget, bounds=prior.m_box, objective=objective, cfg=eval_cfg
    )
    if mm.budget_exhausted:
        print("warning: search budget exhausted before convergence")
    trace_path = out_dir / f"baseline_{method}_trace.csv"
    _write_table(
        trace_path,
        [f"m{i + 1}" for i in range(prior.q)] + ["objective"],
        [tuple(float(v) for v in m) + (val,) for m, val in trace],
    )
    a, b, d = np.asarray(mm.m_hat) * scales
    best_path = out_dir / f"baseline_{method}.csv"
    _write_table(
        best_path,
        ("a", "b", "d", "objective"),
        [(float(a), float(b), float(d), float(mm.f_value))],
    )
    print(f"best m: a={a:.6g} b={b:.6g} d={d:.6g} objective={mm.f_value:.6g}")
    print(f"trace -> {trace_path}")
    return 0


def cmd_diagnose(chain_path, stage: int | None = 3, out=None) -> int:
    """Recompute the summary report from a stored chain file."""
    records = chainio.read_chain(chain_path)
    report = chainio.summarize(records, stage=stage)
    print(report.to_text(), end="")
    if out is not None:
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        chainio.write_report(
            out_dir / "diagnose_report.json", out_dir / "diagnose_report.txt", report
        )
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mixinv",
        description="Bayesian and deterministic inversion for planar-source problems",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", required=True, help="YAML run configuration")
        p.add_argument("--out", default=None, help="output directory (overrides io.out_dir)")
        p.add_argument("--seed", type=int, default=None, help="seed (overrides io.seed)")

    p_gen = sub.add_parser("generate", help="write synthetic model/truth/observation files")
    add_common(p_gen)

    p_inv = sub.add_parser("invert", help="run the Bayesian sampler")
    add_common(p_inv)
    p_inv.add_argument("--n-par", type=int, default=None, help="override sampler.n_par")

    p_base = sub.add_parser("baseline", help="run a deterministic comparison method")
    add_common(p_base)
    p_base.add_argument("--method", required=True, choices=BASELINE_METHODS)

    p_diag = sub.add_parser("diagnose", help="recompute a report from a chain file")
    p_diag.add_argument("--chain", required=True, help="chain.csv produced by invert")
    p_diag.add_argument("--stage", type=int, default=3, help="stage filter (0 = all)")
    p_diag.add_argument("--out", default=None, help="directory for the regenerated report")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            return cmd_generate(args.config, out=args.out, seed=args.seed)
        if args.command == "invert":
            return cmd_invert(args.config, out=args.out, seed=args.seed, n_par=args.n_par)
        if args.command == "baseline":
            return cmd_baseline(args.config, args.method, out=args.out, seed=args.seed)
        if args.command == "diagnose":
            stage = None if args.stage == 0 else args.stage
            return cmd_diagnose(args.chain, stage=stage, out=args.out)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, PlaneIntersectsSurfaceError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except (NumericalError, MixinvError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
