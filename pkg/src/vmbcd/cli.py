"""Batch experiment driver: config parsing, multi-seed runs, CSV traces and SVG plots.

Config files are plain ``key = value`` lines. Keys before the first section
describe the problem and output; each ``[run]`` section adds one method::

    data = synthetic-regression      # or synthetic-classification, or a LIBSVM path
    ell = 200
    n = 100
    loss = squared
    reg = l1
    lam = 2.0
    f_star = auto

    [run]
    name = rcd-uniform
    algorithm = rcd-unit
    sampler = uniform
    seeds = 0-9
    epochs = 50
"""

from __future__ import annotations

import argparse
import csv
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import (
    load_libsvm,
    make_partition,
    profile_for_ratio,
    synth_classification,
    synth_regression,
)
from .problems import LOSS_KINDS, REG_KINDS, CompositeProblem, make_problem
from .solvers import (
    ALGORITHMS,
    METRICS,
    SAMPLERS,
    LineSearchParams,
    MetricPolicy,
    RunConfig,
    reference_solution,
    run,
)
from .theory import TraceRecord

DATA_ROOT_ENV = "VMBCD_DATA_ROOT"
TRACE_COLUMNS = ("epoch", "F", "rel_gap", "G_norm_sq", "mean_alpha", "sparsity", "weighted_epoch", "wall_ms")
AGG_FIELDS = TRACE_COLUMNS[1:]
X_AXES = ("epochs", "weighted-epochs", "time")
SYNTHETIC = ("synthetic-regression", "synthetic-classification")


class ConfigError(ValueError):
    pass


@dataclass
class RunSpec:
    name: str
    algorithm: str = "vm-bcd"
    sampler: str = "uniform"
    inner: int = 10
    metric: str = "hessian"
    seeds: list[int] = field(default_factory=lambda: [0])
    epochs: int = 10
    beta: float = 0.5
    gamma: float = 1e-4


@dataclass
class ExperimentConfig:
    data: str = "synthetic-regression"
    ell: int = 200
    n: int = 100
    block_size: int = 1
    loss: str = "squared"
    C: float = 1.0
    reg: str = "l1"
    lam: float = 1.0
    data_seed: int = 0
    ratio: float | None = None
    heavy_fraction: float = 0.1
    correlation: float = 0.0
    density: float = 1.0
    support: float = 0.1
    heavy_support: bool = False
    features: int | None = None
    f_star: str = "auto"
    reference_epochs: int = 2000
    out: str = "out"
    plot: bool = True
    x_axis: str = "epochs"
    # wall time is opt-in so reruns stay byte-identical
    record_time: bool = False
    runs: list[RunSpec] = field(default_factory=list)


_EXP_TYPES = {
    "ell": int, "n": int, "block_size": int, "C": float, "lam": float, "data_seed": int,
    "ratio": float, "heavy_fraction": float, "correlation": float, "density": float,
    "support": float, "features": int, "reference_epochs": int,
}
_EXP_BOOLS = {"plot", "record_time", "heavy_support"}
_RUN_TYPES = {"inner": int, "epochs": int, "beta": float, "gamma": float}


def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


def parse_seeds(text: str) -> list[int]:
    """``"3"``, ``"0-9"`` (inclusive) or a comma list of either."""
    seeds = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        lo, sep, hi = part.partition("-")
        if sep:
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ValueError(f"empty seed range {part!r}")
            seeds.extend(range(lo, hi + 1))
        else:
            seeds.append(int(part))
    if not seeds:
        raise ValueError("no seeds given")
    return seeds


def parse_config(text: str) -> ExperimentConfig:
    cfg = ExperimentConfig()
    current: dict | None = None
    raw_runs: list[tuple[int, dict]] = []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if line != "[run]":
                raise ConfigError(f"line {lineno}: unknown section {line!r}")
            current = {}
            raw_runs.append((lineno, current))
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if current is not None:
            current[key] = (lineno, value)
            continue
        if not hasattr(cfg, key) or key == "runs":
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        try:
            if key in _EXP_TYPES:
                value = _EXP_TYPES[key](value)
            elif key in _EXP_BOOLS:
                value = _parse_bool(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: {exc}") from None
        setattr(cfg, key, value)
    for idx, (lineno, raw) in enumerate(raw_runs):
        spec = RunSpec(name=f"run{idx}")
        for key, (kl, value) in raw.items():
            if not hasattr(spec, key):
                raise ConfigError(f"line {kl}: unknown run key {key!r}")
            try:
                if key == "seeds":
                    value = parse_seeds(value)
                elif key in _RUN_TYPES:
                    value = _RUN_TYPES[key](value)
            except ValueError as exc:
                raise ConfigError(f"line {kl}: {exc}") from None
            setattr(spec, key, value)
        cfg.runs.append(spec)
    validate_config(cfg)
    return cfg


def validate_config(cfg: ExperimentConfig) -> None:
    if not cfg.runs:
        raise ConfigError("config defines no [run] section")
    if cfg.loss not in LOSS_KINDS:
        raise ConfigError(f"unknown loss {cfg.loss!r}")
    if cfg.reg not in REG_KINDS:
        raise ConfigError(f"unknown regularizer {cfg.reg!r}")
    if not cfg.C > 0:
        raise ConfigError("C must be positive")
    if cfg.lam < 0:
        raise ConfigError("lam must be nonnegative")
    if cfg.block_size < 1:
        raise ConfigError("block_size must be >= 1")
    if cfg.x_axis not in X_AXES:
        raise ConfigError(f"x_axis must be one of {X_AXES}")
    if cfg.x_axis == "time" and not cfg.record_time:
        raise ConfigError("x_axis = time needs record_time = true")
    if cfg.f_star not in ("auto", "none"):
        try:
            float(cfg.f_star)
        except ValueError:
            raise ConfigError("f_star must be 'auto', 'none' or a number") from None
    names = set()
    for spec in cfg.runs:
        if spec.name in names:
            raise ConfigError(f"duplicate run name {spec.name!r}")
        names.add(spec.name)
        if spec.algorithm not in ALGORITHMS:
            raise ConfigError(f"run {spec.name}: unknown algorithm {spec.algorithm!r}")
        if spec.sampler not in SAMPLERS:
            raise ConfigError(f"run {spec.name}: unknown sampler {spec.sampler!r}")
        if spec.metric not in METRICS:
            raise ConfigError(f"run {spec.name}: unknown metric {spec.metric!r}")
        if spec.epochs < 1:
            raise ConfigError(f"run {spec.name}: epochs must be >= 1")
        if spec.inner < 1:
            raise ConfigError(f"run {spec.name}: inner must be >= 1")
        if not (0 < spec.beta < 1 and 0 < spec.gamma < 1):
            raise ConfigError(f"run {spec.name}: beta and gamma must lie in (0, 1)")
    if cfg.data not in SYNTHETIC:
        path = resolve_data_path(cfg.data)
        if not path.is_file():
            raise ConfigError(f"dataset not found: {path}")


def resolve_data_path(name: str) -> Path:
    path = Path(name)
    root = os.environ.get(DATA_ROOT_ENV)
    if root and not path.is_absolute():
        path = Path(root) / path
    return path


def build_problem(cfg: ExperimentConfig) -> CompositeProblem:
    if cfg.data in SYNTHETIC:
        nb = -(-cfg.n // cfg.block_size)
        profile = None if cfg.ratio is None else profile_for_ratio(nb, cfg.ratio, cfg.heavy_fraction)
        common = dict(density=cfg.density, correlation=cfg.correlation, support=cfg.support)
        if cfg.data == "synthetic-regression":
            ds, _ = synth_regression(cfg.data_seed, cfg.ell, cfg.n, cfg.block_size, profile,
                                     heavy_support=cfg.heavy_support, **common)
        else:
            ds, _ = synth_classification(cfg.data_seed, cfg.ell, cfg.n, cfg.block_size, profile, **common)
    else:
        ds = load_libsvm(resolve_data_path(cfg.data), cfg.features)
        if cfg.block_size > 1:
            ds = ds.with_partition(make_partition(ds.shape[1], cfg.block_size))
    return make_problem(ds, cfg.loss, cfg.C, cfg.reg, cfg.lam)


def resolve_f_star(cfg: ExperimentConfig, problem: CompositeProblem) -> float | None:
    if cfg.f_star == "none":
        return None
    if cfg.f_star == "auto":
        if not problem.loss.convex:
            return None
        return reference_solution(problem, max_epochs=cfg.reference_epochs)[1]
    return float(cfg.f_star)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def trace_rows(trace: list[TraceRecord]) -> list[list[str]]:
    return [[_fmt(getattr(r, c)) for c in TRACE_COLUMNS] for r in trace]


def write_trace_csv(path: Path, trace: list[TraceRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TRACE_COLUMNS)
        w.writerows(trace_rows(trace))


def aggregate(traces: list[list[TraceRecord]]) -> list[dict]:
    """Per-epoch mean and median of every numeric column over the seeds present."""
    by_epoch: dict[int, list[TraceRecord]] = {}
    for tr in traces:
        for r in tr:
            by_epoch.setdefault(r.epoch, []).append(r)
    rows = []
    for epoch in sorted(by_epoch):
        recs = by_epoch[epoch]
        row = {"epoch": epoch, "n_seeds": len(recs)}
        for name in AGG_FIELDS:
            vals = [getattr(r, name) for r in recs]
            if any(v is None for v in vals):
                row[f"{name}_mean"] = row[f"{name}_median"] = None
                continue
            arr = np.asarray(vals, dtype=np.float64)
            row[f"{name}_mean"] = float(np.mean(arr))
            row[f"{name}_median"] = float(np.median(arr))
        rows.append(row)
    return rows


def aggregate_columns() -> list[str]:
    cols = ["run", "epoch", "n_seeds"]
    for name in AGG_FIELDS:
        cols += [f"{name}_mean", f"{name}_median"]
    return cols


def write_aggregate_csv(path: Path, per_run: dict[str, list[dict]]) -> None:
    cols = aggregate_columns()
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for name, rows in per_run.items():
            for row in rows:
                w.writerow([name] + [_fmt(row[c]) for c in cols[1:]])


def read_aggregate_csv(path: Path) -> dict[str, list[dict]]:
    out: dict[str, list[dict]] = {}
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            row = {"epoch": int(rec["epoch"]), "n_seeds": int(rec["n_seeds"])}
            for c, v in rec.items():
                if c in ("run", "epoch", "n_seeds"):
                    continue
                row[c] = float(v) if v != "" else None
            out.setdefault(rec["run"], []).append(row)
    return out


def _series(rows: list[dict], x_axis: str, convex_gap: bool) -> tuple[list[float], list[float]]:
    xkey = {"epochs": "epoch", "weighted-epochs": "weighted_epoch_mean", "time": "wall_ms_mean"}[x_axis]
    xs, ys = [], []
    if convex_gap:
        for r in rows:
            xs.append(float(r[xkey]))
            ys.append(r["rel_gap_mean"])
        return xs, ys
    # min-so-far ||G_k||^2 / ||G_0||^2
    g0 = rows[0]["G_norm_sq_mean"] or 1.0
    best = math.inf
    for r in rows:
        best = min(best, r["G_norm_sq_mean"])
        xs.append(float(r[xkey]))
        ys.append(best / g0)
    return xs, ys


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def render_svg(per_run: dict[str, list[dict]], x_axis: str = "epochs", width: int = 640,
               height: int = 400) -> str:
    """Line plot with a log-scale y axis, one polyline per run."""
    convex_gap = all(rows and rows[0].get("rel_gap_mean") is not None for rows in per_run.values())
    ylabel = "relative gap" if convex_gap else "min ||G_k||^2 / ||G_0||^2"
    series = {name: _series(rows, x_axis, convex_gap) for name, rows in per_run.items()}
    floor = 1e-16
    pts = [(x, max(y, floor)) for xs, ys in series.values() for x, y in zip(xs, ys) if y is not None]
    if not pts:
        pts = [(0.0, 1.0)]
    xmin = min(p[0] for p in pts)
    xmax = max(p[0] for p in pts)
    if xmax == xmin:
        xmax = xmin + 1.0
    lo = math.floor(math.log10(min(p[1] for p in pts)))
    hi = math.ceil(math.log10(max(p[1] for p in pts)))
    if hi == lo:
        hi = lo + 1
    left, right, top, bottom = 70, 150, 20, 50
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (x - xmin) / (xmax - xmin) * pw

    def sy(y):
        return top + (hi - math.log10(max(y, floor))) / (hi - lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
           f'font-family="sans-serif" font-size="11">',
           f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>']
    step = max(1, (hi - lo) // 8)
    for e in range(lo, hi + 1, step):
        y = sy(10.0**e)
        out.append(f'<line x1="{left}" y1="{y:.2f}" x2="{left + pw}" y2="{y:.2f}" stroke="#ddd"/>')
        out.append(f'<text x="{left - 6}" y="{y + 4:.2f}" text-anchor="end">1e{e}</text>')
    for j in range(6):
        xv = xmin + (xmax - xmin) * j / 5
        out.append(f'<text x="{sx(xv):.2f}" y="{top + ph + 16}" text-anchor="middle">{xv:.4g}</text>')
    out.append(f'<text x="{left + pw / 2}" y="{height - 8}" text-anchor="middle">{x_axis}</text>')
    out.append(f'<text x="14" y="{top + ph / 2}" text-anchor="middle" '
               f'transform="rotate(-90 14 {top + ph / 2})">{ylabel}</text>')
    for k, (name, (xs, ys)) in enumerate(series.items()):
        color = _COLORS[k % len(_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(y):.2f}" for x, y in zip(xs, ys) if y is not None)
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        ly = top + 14 + 16 * k
        out.append(f'<line x1="{left + pw + 10}" y1="{ly}" x2="{left + pw + 30}" y2="{ly}" stroke="{color}"/>')
        out.append(f'<text x="{left + pw + 34}" y="{ly + 4}">{name}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _run_config(spec: RunSpec, seed: int, f_star, record_time: bool) -> RunConfig:
    return RunConfig(
        algorithm=spec.algorithm, sampler=spec.sampler, inner=spec.inner,
        line_search=LineSearchParams(spec.beta, spec.gamma), metric=MetricPolicy(spec.metric),
        epochs=spec.epochs, seed=seed, f_star=f_star, record_time=record_time,
    )


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None, threads: int = 1,
                   seed_offset: int = 0) -> dict[str, list[dict]]:
    """Run every (run spec, seed), write CSV traces, the aggregate and the plot."""
    out_dir = Path(out if out is not None else cfg.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    problem = build_problem(cfg)
    f_star = resolve_f_star(cfg, problem)
    # warm lazily computed constants before worker threads share the problem
    problem.lipschitz
    if any(s.algorithm == "fista" for s in cfg.runs):
        problem.global_lipschitz
    per_run = {}
    for spec in cfg.runs:
        seeds = [s + seed_offset for s in spec.seeds]

        def one(seed, spec=spec):
            return run(problem, _run_config(spec, seed, f_star, cfg.record_time)).trace

        if threads > 1:
            with ThreadPoolExecutor(threads) as pool:
                traces = list(pool.map(one, seeds))
        else:
            traces = [one(s) for s in seeds]
        for seed, tr in zip(seeds, traces):
            write_trace_csv(out_dir / f"{spec.name}_seed{seed}.csv", tr)
        per_run[spec.name] = aggregate(traces)
    write_aggregate_csv(out_dir / "aggregate.csv", per_run)
    if cfg.plot:
        (out_dir / "convergence.svg").write_text(render_svg(per_run, cfg.x_axis))
    return per_run


def epochs_to_target(rows: list[dict], target: float, column: str = "rel_gap_median"):
    """First ``(epoch, weighted_epoch)`` whose gap is at most ``target``, else ``None``."""
    for r in rows:
        v = r.get(column)
        if v is not None and v <= target:
            return r["epoch"], r["weighted_epoch_mean"]
    return None


def compare_report(aggregates: list, target: float) -> str:
    """Epochs-to-target table and weighted-epoch cost ratio against the first method.

    ``aggregates`` holds aggregate CSV paths or already-loaded aggregates.
    """
    methods: list[tuple[str, list[dict]]] = []
    for k, agg in enumerate(aggregates):
        if not isinstance(agg, dict):
            agg = read_aggregate_csv(Path(agg))
        for name, rows in agg.items():
            methods.append((f"[{k}] {name}" if len(aggregates) > 1 else name, rows))
    if len(methods) < 2:
        raise ValueError("need at least two methods to compare")
    lines = [f"target relative gap {target:g}",
             f"{'method':<32} {'epochs':>11} {'weighted':>12} {'ratio':>8}"]
    base = None
    for k, (name, rows) in enumerate(methods):
        hit = epochs_to_target(rows, target)
        if hit is None:
            lines.append(f"{name:<32} {'not reached':>11} {'-':>12} {'-':>8}")
            continue
        epoch, weighted = hit
        if k == 0:
            base = weighted
        ratio = "-" if not base else f"{weighted / base:.3f}"
        lines.append(f"{name:<32} {epoch:>11d} {weighted:>12.4g} {ratio:>8}")
    return "\n".join(lines)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="vmbcd", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p_run = sub.add_parser("run", help="run an experiment config")
    p_run.add_argument("config")
    p_run.add_argument("--out", default=None, help="output directory (overrides the config)")
    p_run.add_argument("--threads", type=int, default=1)
    p_run.add_argument("--seed-offset", type=int, default=0)
    p_rep = sub.add_parser("report", help="compare aggregate CSVs")
    p_rep.add_argument("aggregates", nargs="+")
    p_rep.add_argument("--target", type=float, required=True)
    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            cfg = parse_config(Path(args.config).read_text())
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1")
            run_experiment(cfg, args.out, args.threads, args.seed_offset)
        else:
            print(compare_report(args.aggregates, args.target))
    except (OSError, ValueError, ArithmeticError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
