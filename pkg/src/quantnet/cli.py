"""Command-line front end: optimize, calibrate, run, benchmark, compare.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
JSON reports go to files, human summaries to standard output.
"""

from __future__ import annotations

import argparse
import json
import os
import statistics
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .calibrate import EmptyDatasetError, build_table, collect_stats
from .data import read_batch_dir, read_labeled_index, write_blob
from .execute import compare_runs, plan, run_fp32, run_int8
from .graph import Graph, GraphError
from .model_io import ParseError, load_model, save_model
from .passes import DEFAULT_PASSES, optimize_pipeline

__all__ = ["main"]


class CliConfigError(Exception):
    """Bad flags, missing files or malformed inputs; maps to exit code 2."""


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + f".tmp{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_report(path: str | None, payload) -> None:
    if path:
        _atomic_write_text(Path(path), json.dumps(payload, indent=2) + "\n")


def _load(args) -> Graph:
    try:
        return load_model(args.model, weights_path=args.weights)
    except (GraphError, FileNotFoundError, OSError) as exc:
        raise CliConfigError(f"cannot load model: {exc}") from exc


def _parse_passes(text: str | None) -> list[str]:
    if text is None:
        return list(DEFAULT_PASSES)
    names = [p.strip() for p in text.split(",") if p.strip()]
    return names


def _input_batches(args, g: Graph) -> list[np.ndarray]:
    if not args.data_dir:
        raise CliConfigError("--data-dir is required for this command")
    try:
        batches = read_batch_dir(args.data_dir)
    except (ParseError, OSError) as exc:
        raise CliConfigError(str(exc)) from exc
    if not batches:
        raise CliConfigError(f"no batches found in {args.data_dir}")
    return batches


def _aggregate_runs(runner, batches):
    reports = [runner(b) for b in batches]
    outputs = {
        e: np.concatenate([r.outputs[e] for r in reports]) for e in reports[0].outputs
    }
    total = reports[0]
    merged = type(total)(
        outputs=outputs,
        per_layer=total.per_layer,
        latency_ms=sum(r.latency_ms for r in reports),
        throughput_ips=0.0,
        batch=sum(r.batch for r in reports),
    )
    if merged.latency_ms > 0:
        merged.throughput_ips = merged.batch * 1000.0 / merged.latency_ms
    return merged


def cmd_optimize(args) -> int:
    g = _load(args)
    names = _parse_passes(args.passes)
    try:
        optimized, reports = optimize_pipeline(g, names)
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    save_model(optimized, args.output)
    payload = [r.to_dict() for r in reports]
    _write_report(args.report, payload)
    for r in reports:
        print(
            f"{r.name}: nodes {r.nodes_before} -> {r.nodes_after}, "
            f"macs {r.macs_before} -> {r.macs_after}, rewrites {len(r.rewrites)}"
        )
    print(f"wrote {args.output}")
    return 0


def cmd_calibrate(args) -> int:
    g = _load(args)
    if not args.calib_dir:
        raise CliConfigError("--calib-dir is required")
    try:
        batches = read_batch_dir(args.calib_dir)
        stats = collect_stats(g, batches)
    except (ParseError, OSError, EmptyDatasetError) as exc:
        raise CliConfigError(str(exc)) from exc
    table = build_table(g, stats)
    annotated = g.copy()
    annotated.quant = table
    save_model(annotated, args.output)
    by_role: dict[str, int] = {}
    for entry in table.entries.values():
        by_role[entry.role] = by_role.get(entry.role, 0) + 1
    print(
        "calibration table: "
        + ", ".join(f"{n} {role} entries" for role, n in sorted(by_role.items()))
        + f", {len(table.fallback_edges)} fallback edges"
    )
    payload = {
        "entries": [
            {"name": e.name, "p": e.precision, "q": e.factor, "role": e.role}
            for e in table.entries.values()
        ],
        "fallback_edges": sorted(table.fallback_edges),
    }
    _write_report(args.report, payload)
    print(f"wrote {args.output}")
    return 0


def _make_runner(g: Graph, precision: str, threads: int):
    if precision == "int8":
        if g.quant is None:
            raise CliConfigError("model has no quant lines; calibrate it before --precision int8")
        ex = plan(g, g.quant)
        return lambda batch, keep_all=False: run_int8(ex, g, batch, threads=threads,
                                                      keep_all=keep_all)
    return lambda batch, keep_all=False: run_fp32(g, batch, threads=threads, keep_all=keep_all)


def cmd_run(args) -> int:
    g = _load(args)
    runner = _make_runner(g, args.precision, args.threads)
    batches = _input_batches(args, g)
    report = _aggregate_runs(lambda b: runner(b), batches)
    print(
        f"ran {report.batch} samples in {report.latency_ms:.3f} ms "
        f"({report.throughput_ips:.1f} images/s), precision={args.precision}"
    )
    if args.dump_dir:
        dump = Path(args.dump_dir)
        dump.mkdir(parents=True, exist_ok=True)
        for edge, arr in report.outputs.items():
            write_blob(dump / f"{edge.replace('/', '_')}.bin", arr)
        print(f"dumped {len(report.outputs)} output tensors to {dump}")
    _write_report(args.report, report.to_dict())
    return 0


def cmd_benchmark(args) -> int:
    g = _load(args)
    runner = _make_runner(g, args.precision, args.threads)
    shape = g.input_nodes()[0].kind.shape
    # Fake data is enough for speed measurement; values are in-range but random.
    rng = np.random.default_rng(0)
    batch = rng.random((args.batch, *shape[1:]), dtype=np.float32)
    for _ in range(args.warmup):
        runner(batch)
    latencies = [runner(batch).latency_ms for _ in range(args.iters)]
    median = statistics.median(latencies)
    throughput = args.batch * 1000.0 / median if median > 0 else 0.0
    print(
        f"batch={args.batch} iters={args.iters} median_latency_ms={median:.3f} "
        f"throughput_ips={throughput:.1f}"
    )
    _write_report(
        args.report,
        {
            "batch": args.batch,
            "iterations": args.iters,
            "latencies_ms": latencies,
            "median_latency_ms": median,
            "throughput_ips": throughput,
            "precision": args.precision,
        },
    )
    return 0


def cmd_compare(args) -> int:
    g_a = _load(args)
    if args.quant_model:
        try:
            g_b = load_model(args.quant_model)
        except (GraphError, FileNotFoundError, OSError) as exc:
            raise CliConfigError(f"cannot load quantized model: {exc}") from exc
    else:
        g_b = g_a
    precision_b = "int8" if g_b.quant is not None else "fp32"
    run_a = _make_runner(g_a, "fp32", args.threads)
    run_b = _make_runner(g_b, precision_b, args.threads)

    if args.labels:
        shape = g_a.input_nodes()[0].kind.shape
        try:
            samples, labels = read_labeled_index(args.labels, tuple(shape[1:]))
        except (ParseError, OSError) as exc:
            raise CliConfigError(str(exc)) from exc
        if samples.shape[0] == 0:
            raise CliConfigError(f"labels index {args.labels} holds no samples")
        batches = [samples[i : i + args.batch] for i in range(0, samples.shape[0], args.batch)]
        metric = args.metric if args.metric != "elementwise" else "top1"
    else:
        batches = _input_batches(args, g_a)
        labels = None
        metric = "elementwise" if args.metric in (None, "elementwise") else args.metric
        if metric != "elementwise":
            raise CliConfigError("--labels is required for top-k comparison")

    rep_a = _aggregate_runs(lambda b: run_a(b), batches)
    rep_b = _aggregate_runs(lambda b: run_b(b), batches)
    try:
        result = compare_runs(rep_a, rep_b, metric=metric, labels=labels)
    except ValueError as exc:
        raise CliConfigError(str(exc)) from exc
    if metric == "elementwise":
        print(f"max |fp32 - other| over outputs: {result['max_abs_diff']:.6g}")
    else:
        print(
            f"{metric}: fp32 {result['accuracy_a'] * 100:.2f}% vs "
            f"{precision_b} {result['accuracy_b'] * 100:.2f}% "
            f"(delta {result['delta_pp']:+.2f} pp)"
        )
    _write_report(args.report, result)
    return 0


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--model", required=True, help="model document path")
    p.add_argument("--weights", default=None, help="override the referenced weight blob")
    p.add_argument("--threads", type=int, default=1, help="batch-parallel worker threads")
    p.add_argument("--report", default=None, help="write a JSON report to this path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="quantnet",
        description="Small-CNN graph optimization, max-abs calibration and INT8 inference.",
    )
    parser.add_argument("--version", action="version", version=f"quantnet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="apply graph optimization passes")
    _add_common(p)
    p.add_argument("--passes", default=None,
                   help="comma-separated pass names (default: full pipeline; '' = none)")
    p.add_argument("-o", "--output", required=True, help="optimized model document path")
    p.set_defaults(func=cmd_optimize)

    p = sub.add_parser("calibrate", help="sample extrema and emit a quantized model")
    _add_common(p)
    p.add_argument("--calib-dir", required=True, help="calibration batch directory")
    p.add_argument("-o", "--output", required=True, help="quantized model document path")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("run", help="run inference over a batch directory")
    _add_common(p)
    p.add_argument("--data-dir", required=True, help="input batch directory")
    p.add_argument("--precision", choices=("fp32", "int8"), default="fp32")
    p.add_argument("--dump-dir", default=None, help="dump output tensors here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("benchmark", help="measure latency and throughput on fake data")
    _add_common(p)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--warmup", type=int, default=1)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--precision", choices=("fp32", "int8"), default="fp32")
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("compare", help="compare the FP32 path against a quantized model")
    _add_common(p)
    p.add_argument("--quant-model", default=None,
                   help="quantized model document (default: compare --model with itself)")
    p.add_argument("--metric", choices=("elementwise", "top1", "top5"), default=None)
    p.add_argument("--labels", default=None, help="labeled dataset index file")
    p.add_argument("--data-dir", default=None, help="unlabeled batch directory")
    p.add_argument("--batch", type=int, default=64, help="evaluation batch size")
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for attr, floor in (("batch", 1), ("iters", 1), ("threads", 1), ("warmup", 0)):
        if getattr(args, attr, floor) < floor:
            print(f"error: --{attr} must be >= {floor}", file=sys.stderr)
            return 2
    try:
        return args.func(args)
    except CliConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # runtime failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
