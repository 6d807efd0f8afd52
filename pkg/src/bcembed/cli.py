"""Command-line interface: ``bcembed {ingest,synth,run,convert,report}``.

Exit codes: 0 success, 2 configuration or validation problem, 3 numeric or
runtime failure during a run (partial artifacts are kept next to a
``FAILED`` marker).

Run configuration is one JSON file::

    {
      "dataset": {"graph": "data.bcg"}
                 | {"edges": "e.csv", "features": "f.csv"}
                 | {"synthetic": {"seed": 0, "num_users": 500, ...}},
      "schedule": [0.5, 0.6, 0.7, 0.8, 0.9],
      "benchmark": {...BenchmarkConfig fields, "train": {...TrainConfig fields}},
      "methods": ["KeepAll", "BCAligner", ...],
      "seed": 0,
      "output": "runs/demo"
    }

Relative output paths resolve against ``$BCEMBED_RUN_ROOT`` when it is set.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import compat, encoder as enc, evaluation as ev
from .errors import NumericError, StateError, ValidationError, VersionRangeError
from .graph import VersionSchedule, generate_synthetic, ingest, load_graph, save_graph
from .methods import METHODS

log = logging.getLogger("bcembed")

RUN_ROOT_ENV = "BCEMBED_RUN_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
DEFAULT_LAMBDAS = (1.0, 2.0, 4.0, 8.0, 16.0, 32.0)

SYNTH_DEFAULTS = {"seed": 0, "num_users": 500, "num_items": 200, "num_interactions": 20000,
                  "feature_dim": 32, "latent_dim": 8}


class ConfigError(ValidationError):
    pass


# ---------------------------------------------------------------------------
# config


def _resolve_output(path) -> Path:
    p = Path(path)
    root = os.environ.get(RUN_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _require_file(path, what) -> Path:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what}: no such file: {p}")
    return p


def load_run_config(path) -> dict:
    try:
        with open(_require_file(path, "config"), encoding="utf-8") as fh:
            cfg = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config: top level must be an object")
    return cfg


def apply_overrides(cfg: dict, args) -> dict:
    cfg = json.loads(json.dumps(cfg))
    bench = cfg.setdefault("benchmark", {})
    train = bench.setdefault("train", {})
    if args.methods:
        cfg["methods"] = args.methods.split(",")
    if args.out:
        cfg["output"] = args.out
    if args.graph:
        cfg["dataset"] = {"graph": args.graph}
    if args.seed is not None:
        cfg["seed"] = args.seed
    for flag, key in (("epochs", "epochs"), ("lam", "lam"), ("learning_rate", "learning_rate"),
                      ("batch_size", "batch_size")):
        if getattr(args, flag) is not None:
            train[key] = getattr(args, flag)
    if args.consumer_seeds is not None:
        bench["consumer_seeds"] = args.consumer_seeds
    return cfg


def validate_run_config(cfg: dict):
    """Check every field and build ``(graph, schedule, BenchmarkConfig, methods, out)``."""
    problems = []
    unknown = set(cfg) - {"dataset", "schedule", "benchmark", "methods", "seed", "output"}
    if unknown:
        problems.append(f"unknown fields: {sorted(unknown)}")
    methods = cfg.get("methods", ["KeepAll"])
    bad = [m for m in methods if m not in METHODS]
    if bad:
        problems.append(f"methods: unknown {bad}; choose from {list(METHODS)}")
    seed = cfg.get("seed", 0)
    if not isinstance(seed, int) or seed < 0:
        problems.append("seed: must be a non-negative integer")
    try:
        schedule = VersionSchedule(tuple(cfg["schedule"])) if "schedule" in cfg else VersionSchedule()
    except (ValidationError, TypeError) as exc:
        problems.append(f"schedule: {exc}")
        schedule = None
    bench_d = dict(cfg.get("benchmark", {}))
    bench_d["train"] = dict(bench_d.get("train", {}), seed=seed if isinstance(seed, int) else 0)
    try:
        bench = ev.BenchmarkConfig.from_dict(bench_d)
    except (ValidationError, TypeError) as exc:
        problems.append(f"benchmark: {exc}")
        bench = None
    if "output" not in cfg:
        problems.append("output: required")
    ds = cfg.get("dataset")
    if not isinstance(ds, dict) or not ({"graph", "edges", "synthetic"} & set(ds)):
        problems.append("dataset: need one of 'graph', 'edges' or 'synthetic'")
    else:
        for key in ("graph", "edges", "features"):
            if key in ds and not Path(ds[key]).is_file():
                problems.append(f"dataset.{key}: no such file: {ds[key]}")
    if problems:
        raise ConfigError("; ".join(problems))
    return _load_dataset(ds), schedule, bench, methods, _resolve_output(cfg["output"])


def _load_dataset(ds: dict):
    if "graph" in ds:
        return load_graph(ds["graph"])
    if "edges" in ds:
        return ingest(ds["edges"], ds.get("features"))
    spec = dict(SYNTH_DEFAULTS, **ds["synthetic"])
    try:
        return generate_synthetic(**spec)
    except TypeError as exc:
        raise ConfigError(f"dataset.synthetic: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def _print_stats(graph, out=None):
    out = out or sys.stdout
    stats = graph.stats()
    width = max(len(k) for k in stats)
    for k, v in stats.items():
        print(f"{k:<{width}}  {v:,}", file=out)


def cmd_ingest(args) -> int:
    edges = _require_file(args.edges, "edge file")
    features = _require_file(args.features, "feature file") if args.features else None
    graph = ingest(edges, features, delimiter=args.delimiter, skip_header=args.skip_header)
    save_graph(graph, args.out)
    _print_stats(graph)
    return EXIT_OK


def cmd_synth(args) -> int:
    graph = generate_synthetic(args.seed, args.users, args.items, args.interactions,
                               args.feature_dim, args.latent_dim, drift=args.drift)
    save_graph(graph, args.out)
    _print_stats(graph)
    return EXIT_OK


def _run_one(graph, schedule, method, bench, reference, out_dir):
    return ev.run_benchmark(graph, schedule, method, bench, reference=reference, run_dir=out_dir)


def _run_methods(graph, schedule, bench, methods, out_dir: Path, workers: int,
                 keepall=None) -> dict:
    """Keep-All first, then the others (optionally in worker processes)."""
    out_dir.mkdir(parents=True, exist_ok=True)
    if keepall is None:
        keepall = ev.run_benchmark(graph, schedule, "KeepAll", bench, run_dir=out_dir)
    reports = {"KeepAll": keepall.report}
    others = [m for m in methods if m != "KeepAll"]
    if workers > 1 and len(others) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = {m: pool.submit(_run_one, graph, schedule, m, bench, keepall, out_dir)
                       for m in others}
            for m, fut in futures.items():
                reports[m] = fut.result().report
    else:
        for m in others:
            reports[m] = _run_one(graph, schedule, m, bench, keepall, out_dir).report
    rows = ev.summary_table(reports)
    ev.write_rows(out_dir / "summary.csv", rows, ev.SUMMARY_COLUMNS)
    _print_summary(rows)
    return reports


def _print_summary(rows, out=None):
    out = out or sys.stdout
    print(f"{'method':<14} {'(1)':>8} {'(2)':>8} {'(1)+(2)':>8} {'(3)':>7}", file=out)
    for r in rows:
        print(f"{r['method']:<14} {r['intended_degradation']:8.2f} "
              f"{r['unintended_degradation']:8.2f} {r['combined_degradation']:8.2f} "
              f"{r['alignment_error']:7.3f}", file=out)


def cmd_run(args) -> int:
    cfg = apply_overrides(load_run_config(args.config), args)
    graph, schedule, bench, methods, out = validate_run_config(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg, fh, indent=1, sort_keys=True)
    marker = out / "FAILED"
    if marker.exists():
        marker.unlink()
    try:
        if args.lambda_sweep is None:
            _run_methods(graph, schedule, bench, methods, out, args.workers)
        else:
            lambdas = args.lambda_sweep or DEFAULT_LAMBDAS
            keepall = ev.run_benchmark(graph, schedule, "KeepAll", bench, run_dir=out)
            for lam in lambdas:
                print(f"lambda = {lam:g}")
                b = replace(bench, train=replace(bench.train, lam=float(lam)))
                _run_methods(graph, schedule, b, methods, out / f"lambda_{lam:g}", args.workers,
                             keepall=keepall)
    except (NumericError, StateError, ArithmeticError, RuntimeError) as exc:
        marker.write_text(f"{type(exc).__name__}: {exc}\n", encoding="utf-8")
        raise _RunFailure(str(exc)) from exc
    return EXIT_OK


class _RunFailure(Exception):
    pass


def cmd_convert(args) -> int:
    registry = compat.load_registry(_require_file(args.registry, "registry"))
    table = enc.load_table(_require_file(args.table, "table"))
    if args.version >= table.version or args.version < 0:
        raise VersionRangeError(f"target version must be in 0..{table.version - 1}, "
                                f"got {args.version}")
    if table.version > registry.latest:
        raise StateError(f"registry ends at version {registry.latest}; "
                         f"cannot convert a version-{table.version} table")
    out = compat.to_version(registry, table, args.version)
    enc.save_table(out, args.out)
    print(f"wrote version-{out.version} table ({out.dim} dims) to {args.out}")
    return EXIT_OK


def cmd_report(args) -> int:
    run_dir = _resolve_output(args.run_dir)
    reports = {}
    for path in sorted(run_dir.glob("*/report.json")):
        with open(path, encoding="utf-8") as fh:
            r = ev.report_from_dict(json.load(fh))
        reports[r.method] = r
    if not reports:
        raise ConfigError(f"no method reports under {run_dir}")
    rows = ev.summary_table(reports)
    _print_summary(rows)
    if args.csv:
        ev.write_rows(args.csv, rows, ev.SUMMARY_COLUMNS)
    if args.per_version:
        with open(args.per_version, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "version", "metric", "value"])
            for name, rep in reports.items():
                for row in rep.per_version_degradation(reports["KeepAll"]):
                    w.writerow([name, row["version"], row["metric"], repr(row["value"])])
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def _lambda_list(text):
    if text == "":
        return ()
    try:
        return tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bcembed", description=__doc__.split("\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="read an edge list (+ item features) into a graph file")
    s.add_argument("edges")
    s.add_argument("--features")
    s.add_argument("--out", required=True)
    s.add_argument("--delimiter", default=",")
    s.add_argument("--skip-header", action="store_true")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate a synthetic evolving interaction graph")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--users", type=int, default=SYNTH_DEFAULTS["num_users"])
    s.add_argument("--items", type=int, default=SYNTH_DEFAULTS["num_items"])
    s.add_argument("--interactions", type=int, default=SYNTH_DEFAULTS["num_interactions"])
    s.add_argument("--feature-dim", type=int, default=SYNTH_DEFAULTS["feature_dim"])
    s.add_argument("--latent-dim", type=int, default=SYNTH_DEFAULTS["latent_dim"])
    s.add_argument("--drift", type=float, default=0.8)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("run", help="train and evaluate methods over all versions")
    s.add_argument("config")
    s.add_argument("--methods", help="comma-separated method names")
    s.add_argument("--graph", help="graph file (overrides the config's dataset)")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)
    s.add_argument("--epochs", type=int)
    s.add_argument("--lam", type=float)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--consumer-seeds", type=int)
    s.add_argument("--lambda-sweep", nargs="?", const="", type=_lambda_list, default=None,
                   metavar="L1,L2,...",
                   help="one run per lambda (default 1,2,4,8,16,32), each in lambda_<value>/")
    s.add_argument("--workers", type=int, default=1)
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("convert", help="convert an embedding table to an older version")
    s.add_argument("table")
    s.add_argument("--registry", required=True)
    s.add_argument("--to", dest="version", type=int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("report", help="summarize the method reports of a run directory")
    s.add_argument("run_dir")
    s.add_argument("--csv")
    s.add_argument("--per-version")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except _RunFailure as exc:
        print(f"error: run failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValidationError, VersionRangeError, StateError, ValueError, KeyError,
            OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
