"""Chain persistence and summary statistics.

The chain file is self-describing: ``#``-prefixed key=value header lines
carry everything a later diagnosis needs (dimensions, coordinate scales,
stage boundaries, acceptance rates, a config digest), followed by one CSV
record per retained sample. Floats are serialized with 17 significant
digits so values round-trip exactly and recomputed statistics match the
originals.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError

__all__ = [
    "ChainRecords",
    "SummaryReport",
    "write_chain",
    "read_chain",
    "write_series",
    "summarize",
    "write_report",
]

_FMT = "%.17g"


def _fmt(x: float) -> str:
    return _FMT % x


@dataclass(frozen=True)
class ChainRecords:
    """Parsed chain file: header metadata plus per-sample arrays."""

    meta: dict
    index: np.ndarray
    stage: np.ndarray
    m: np.ndarray              # (N, q) normalized geometry coordinates
    t: np.ndarray              # (N,) log10 C
    log_density: np.ndarray
    sigma_max_sq: np.ndarray

    @property
    def n_samples(self) -> int:
        return self.index.size

    @property
    def scales(self) -> np.ndarray:
        return np.array(
            [self.meta["a_scale"], self.meta["b_scale"], self.meta["d_scale"]],
            dtype=float,
        )


@dataclass(frozen=True)
class SummaryReport:
    """Posterior point statistics mirroring the reporting convention.

    Means/stds are in physical coordinates (a, b, d, log10 C); the std is
    the square root of the diagonal of the sample covariance (ddof=1) over
    the selected stage.
    """

    mean: dict
    std: dict
    sigma_max_expected: float
    acceptance_rates: tuple
    n_samples: int
    stage: int | None
    wall_time: float | None = None
    config_digest: str | None = None
    extra: dict = field(default_factory=dict)

    def stats_dict(self) -> dict:
        """The recomputable part of the report (excludes wall time etc.)."""
        return {
            "mean": dict(self.mean),
            "std": dict(self.std),
            "sigma_max_expected": self.sigma_max_expected,
            "acceptance_rates": list(self.acceptance_rates),
            "n_samples": self.n_samples,
            "stage": self.stage,
        }

    def to_dict(self) -> dict:
        out = self.stats_dict()
        out["wall_time"] = self.wall_time
        out["config_digest"] = self.config_digest
        out.update(self.extra)
        return out

    def to_text(self) -> str:
        lines = ["posterior summary" + (f" (stage {self.stage})" if self.stage else "")]
        for key in self.mean:
            lines.append(f"  {key:8s} = {self.mean[key]: .6g} +- {self.std[key]:.6g}")
        lines.append(f"  sigma_max expected = {self.sigma_max_expected:.6g}")
        rates = ", ".join(f"{r:.3f}" for r in self.acceptance_rates)
        lines.append(f"  acceptance rates (stages 1-3) = {rates}")
        lines.append(f"  samples used = {self.n_samples}")
        if self.wall_time is not None:
            lines.append(f"  wall time = {self.wall_time:.2f} s")
        if self.config_digest:
            lines.append(f"  config digest = {self.config_digest}")
        return "\n".join(lines) + "\n"


def write_chain(path, states, log_densities, sigma_max_sq, meta: dict) -> None:
    """Write one chain file; see the module docstring for the layout.

    ``meta`` must contain q, n_par, a_scale, b_scale, d_scale, stage_marks
    (3 ints) and acceptance (3 floats); anything else is stored verbatim.
    """
    states = np.asarray(states, dtype=float)
    n, dim = states.shape
    q = int(meta["q"])
    if dim != q + 1:
        raise ValueError(f"states have dimension {dim}, expected q+1 = {q + 1}")
    marks = [int(v) for v in meta["stage_marks"]]
    stage_of = np.searchsorted(marks, np.arange(n), side="right")

    header = dict(meta)
    header["n_samples"] = n
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("# mixinv-chain v1\n")
        for key, value in header.items():
            if isinstance(value, (list, tuple, np.ndarray)):
                value = ",".join(str(v) for v in value)
            f.write(f"# {key}={value}\n")
        cols = ["index", "stage"] + [f"m{i + 1}" for i in range(q)]
        cols += ["log10_c", "log_density", "sigma_max_sq"]
        f.write(",".join(cols) + "\n")
        for i in range(n):
            row = [str(i), str(int(stage_of[i]))]
            row += [_fmt(v) for v in states[i, :q]]
            row += [_fmt(states[i, q]), _fmt(log_densities[i]), _fmt(sigma_max_sq[i])]
            f.write(",".join(row) + "\n")


def _parse_meta_value(value: str):
    if "," in value:
        return [_parse_meta_value(v) for v in value.split(",")]
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            continue
    return value


def read_chain(path) -> ChainRecords:
    """Parse a chain file, naming the first bad record on corruption."""
    meta: dict = {}
    header_cols = None
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, value = body.partition("=")
                    meta[key.strip()] = _parse_meta_value(value.strip())
                continue
            if header_cols is None:
                header_cols = line.split(",")
                continue
            rows.append((lineno, line))

    required = ("q", "stage_marks", "acceptance", "a_scale", "b_scale", "d_scale")
    for key in required:
        if key not in meta:
            raise DataError(f"chain file missing required header field {key!r}")
    q = int(meta["q"])
    expected_cols = 2 + q + 3
    if header_cols is None or len(header_cols) != expected_cols:
        raise DataError("chain file has a missing or malformed column header")

    n = len(rows)
    if "n_samples" in meta and int(meta["n_samples"]) != n:
        raise DataError(
            f"chain file truncated: header declares {meta['n_samples']} records, "
            f"found {n} (first missing record {n})"
        )
    index = np.empty(n, dtype=int)
    stage = np.empty(n, dtype=int)
    m = np.empty((n, q))
    t = np.empty(n)
    log_density = np.empty(n)
    sigma_max_sq = np.empty(n)
    for i, (lineno, line) in enumerate(rows):
        parts = line.split(",")
        if len(parts) != expected_cols:
            raise DataError(
                f"record {i} (line {lineno}): expected {expected_cols} fields, "
                f"got {len(parts)}"
            )
        try:
            index[i] = int(parts[0])
            stage[i] = int(parts[1])
            values = [float(v) for v in parts[2:]]
        except ValueError as exc:
            raise DataError(f"record {i} (line {lineno}): {exc}") from exc
        m[i] = values[:q]
        t[i] = values[q]
        log_density[i] = values[q + 1]
        sigma_max_sq[i] = values[q + 2]
        if index[i] != i:
            raise DataError(f"record {i} (line {lineno}): index field reads {index[i]}")
    return ChainRecords(
        meta=meta,
        index=index,
        stage=stage,
        m=m,
        t=t,
        log_density=log_density,
        sigma_max_sq=sigma_max_sq,
    )


def write_series(path, records: ChainRecords) -> None:
    """Emit the running mean/std series used to redraw the usual figures.

    One row per retained sample: decimal log density plus the running mean
    and standard deviation of a, b, d/100 and log10 C (d is divided by 100
    to match the plotting convention).
    """
    scales = records.scales
    coords = np.column_stack(
        [
            records.m[:, 0] * scales[0],
            records.m[:, 1] * scales[1],
            records.m[:, 2] * scales[2] / 100.0,
            records.t,
        ]
    )
    names = ["a", "b", "d_over_100", "log10_c"]
    n = coords.shape[0]
    mean = np.zeros(4)
    m2 = np.zeros(4)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        cols = ["index", "stage", "log10_density"]
        cols += [f"mean_{s}" for s in names] + [f"std_{s}" for s in names]
        f.write(",".join(cols) + "\n")
        for i in range(n):
            delta = coords[i] - mean
            mean = mean + delta / (i + 1)
            m2 = m2 + delta * (coords[i] - mean)
            std = np.sqrt(m2 / i) if i >= 1 else np.zeros(4)
            log10_density = records.log_density[i] / math.log(10.0)
            row = [str(i), str(int(records.stage[i])), _fmt(log10_density)]
            row += [_fmt(v) for v in mean] + [_fmt(v) for v in std]
            f.write(",".join(row) + "\n")


def summarize(records: ChainRecords, stage: int | None = 3) -> SummaryReport:
    """Recompute the posterior summary from stored samples.

    ``stage`` filters to one stage (3 = the adaptive stage, the default
    reporting convention); None uses every record.
    """
    mask = np.ones(records.n_samples, dtype=bool) if stage is None else records.stage == stage
    if not np.any(mask):
        raise DataError(f"no records in stage {stage!r}")
    scales = records.scales
    coords = np.column_stack([records.m[mask] * scales[None, :], records.t[mask]])
    names = ("a", "b", "d", "log10_c")
    mean = coords.mean(axis=0)
    if coords.shape[0] >= 2:
        std = coords.std(axis=0, ddof=1)
    else:
        std = np.zeros(coords.shape[1])
    sig = records.sigma_max_sq[mask]
    sig = sig[np.isfinite(sig)]
    sigma_max_expected = float(np.mean(np.sqrt(sig))) if sig.size else float("nan")
    acceptance = tuple(float(a) for a in np.atleast_1d(records.meta["acceptance"]))
    return SummaryReport(
        mean={k: float(v) for k, v in zip(names, mean)},
        std={k: float(v) for k, v in zip(names, std)},
        sigma_max_expected=sigma_max_expected,
        acceptance_rates=acceptance,
        n_samples=int(mask.sum()),
        stage=stage,
        config_digest=records.meta.get("config_digest"),
    )


def write_report(path_json, path_text, report: SummaryReport) -> None:
    with open(path_json, "w", encoding="utf-8", newline="\n") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    with open(path_text, "w", encoding="utf-8", newline="\n") as f:
        f.write(report.to_text())
