"""Command-line driver: ``packmamba <command> [options]``."""

from __future__ import annotations

import argparse
import json
import logging
import statistics
import sys
import time
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from .block import init_block_params, mamba_block_backward, mamba_block_packed
from .flops import flop_ratio, flops_estimate, load_config, per_slot_breakdown
from .packing import (SequenceBatch, pack, padding_rate, plan_fifo, plan_greedy_sorted,
                      plan_pad_to_max)
from .scan import set_num_threads
from .verify import DEFAULT_TOLERANCES, run_verify

log = logging.getLogger("packmamba")

DEFAULT_PROFILE_LENGTHS = "1,2,3,4,6,8,12,16,24,32,48,64,96,128,192,256,384,512,768,1024,2048,4096"


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="RNG seed (unsigned 64-bit)")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--threads", type=int, default=1, help="worker threads for lane-parallel scans")
    p.add_argument("--format", choices=("json", "text", "csv"), default="text")
    p.add_argument("--config", type=Path, help="JSON file with model presets")
    p.add_argument("--output", "-o", type=Path, help="write to this file instead of stdout")
    p.add_argument("-v", "--verbose", action="store_true")


def _length_flags(p: argparse.ArgumentParser, **defaults) -> None:
    g = p.add_argument_group("length distribution")
    g.add_argument("--kind", choices=bench_mod.KINDS, default=defaults.get("kind", "truncated-lognormal"))
    g.add_argument("--min-len", type=int, default=defaults.get("min_len", 57))
    g.add_argument("--max-len", type=int, default=defaults.get("max_len", 2048))
    g.add_argument("--mean", type=float, default=defaults.get("mean", 646.0))
    g.add_argument("--count", type=int, default=defaults.get("count", 100_000))
    g.add_argument("--sigma", type=float, default=1.0, help="log-space spread of the lognormal")
    g.add_argument("--lengths-file", help="read lengths from a file (implies --kind file)")


def _lengths(args) -> list[int]:
    kind = "file" if args.lengths_file else args.kind
    mean = args.mean if kind == "truncated-lognormal" else None
    spec = bench_mod.LengthDistributionSpec(
        kind=kind, min_len=args.min_len, max_len=args.max_len, target_mean=mean,
        sample_count=args.count, seed=args.seed, sigma=args.sigma, path=args.lengths_file)
    return bench_mod.gen_lengths(spec)


def _model(args, name):
    presets = load_config(args.config)
    if name not in presets:
        raise SystemExit(f"unknown model preset {name!r}; available: {', '.join(sorted(presets))}")
    return presets[name]


def _emit(args, rows: list[dict], doc: dict | None = None) -> None:
    if args.format == "json":
        text = json.dumps(doc if doc is not None else rows, indent=2, sort_keys=True)
    elif args.format == "csv":
        import csv
        import io
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        text = buf.getvalue().rstrip("\n")
    else:
        text = bench_mod.format_table(rows)
    if args.output:
        args.output.write_text(text + "\n")
    else:
        print(text)


def cmd_gen_lengths(args) -> int:
    lengths = _lengths(args)
    if args.format == "json":
        doc = {"lengths": lengths, "count": len(lengths), "mean": sum(lengths) / len(lengths)}
        _emit(args, [], doc)
    else:
        text = "\n".join(map(str, lengths)) if args.format == "text" else "length\n" + "\n".join(map(str, lengths))
        if args.output:
            args.output.write_text(text + "\n")
        else:
            print(text)
    return 0


def cmd_compare(args) -> int:
    lengths = _lengths(args)
    model = _model(args, args.model)
    env = {"precision": args.precision, "threads": args.threads, "seed": args.seed}
    report = bench_mod.compare_strategies(lengths, args.capacity, args.pad_capacity, model, env)
    timing = not args.omit_timing
    doc = report.to_dict(timing)
    _emit(args, doc["rows"], doc)
    return 0


def cmd_profile(args) -> int:
    sweep = [int(v) for v in args.lengths.split(",") if v.strip()]
    rows = bench_mod.profile_scan(sweep, args.channels, args.states, args.precision,
                                  repeats=args.repeats, seed=args.seed)
    doc = {"environment": {"precision": args.precision, "threads": args.threads, "seed": args.seed,
                           "lanes": args.channels * args.states}, "rows": rows}
    _emit(args, rows, doc)
    return 0


def cmd_flops(args) -> int:
    lengths = _lengths(args)
    model = _model(args, args.model)
    padded = plan_pad_to_max(lengths, args.pad_capacity or max(lengths))
    rows = []
    for name, plan in (("pad-to-max", padded), ("fifo-pack", plan_fifo(lengths, args.capacity)),
                       ("greedy-pack", plan_greedy_sorted(lengths, args.capacity))):
        ratio = flop_ratio(model, plan, padded)
        rows.append({"strategy": name, "slots": plan.total_slots, "padding_rate": padding_rate(plan),
                     "total_flops": flops_estimate(model, plan),
                     "ratio_vs_padded": float(ratio), "ratio_exact": f"{ratio.numerator}/{ratio.denominator}"})
    doc = {"model": model.name, "layers": model.layers, "per_slot_per_layer": per_slot_breakdown(model),
           "rows": rows}
    _emit(args, rows, doc)
    return 0


def cmd_verify(args) -> int:
    tolerances = {}
    for item in args.tolerance or []:
        key, _, val = item.partition("=")
        if key not in DEFAULT_TOLERANCES:
            raise SystemExit(f"unknown tolerance key {key!r}; known: {', '.join(DEFAULT_TOLERANCES)}")
        tolerances[key] = float(val)
    report = run_verify(args.suite, args.seed, tolerances, args.inject_fault, args.scale)
    if args.format == "json" or args.output:
        text = json.dumps(report, indent=2, sort_keys=True)
    else:
        lines = []
        for suite, res in report["suites"].items():
            for c in res["checks"]:
                dev = c.get("max_rel_dev", c.get("max_abs_dev"))
                extra = f" max_dev={dev:.3g}" if isinstance(dev, float) else ""
                if c.get("counterexample"):
                    extra += f" counterexample={c['counterexample']}"
                lines.append(f"{'PASS' if c['passed'] else 'FAIL'}  {suite:12s} {c['name']}{extra}")
        lines.append("ALL PASSED" if report["passed"] else "FAILURES PRESENT")
        text = "\n".join(lines)
    if args.output:
        args.output.write_text(text + "\n")
    else:
        print(text)
    return 0 if report["passed"] else 1


def _median_time(fn, repeats):
    fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return statistics.median(times)


def cmd_bench(args) -> int:
    lengths = _lengths(args)
    model = _model(args, args.model)
    dtype = np.float32 if args.precision == "f32" else np.float64
    params = init_block_params(model.model_dim, model.expansion, model.state_dim, model.conv_width,
                               seed=args.seed, dtype=dtype)
    rng = np.random.default_rng(args.seed)
    batch = SequenceBatch(tuple(rng.standard_normal((n, model.model_dim)).astype(dtype) for n in lengths))
    capacity = max(args.capacity, max(lengths))
    layouts = {
        "single-sequence": None,
        "pad-to-max": plan_pad_to_max(lengths, max(lengths)),
        "fifo-pack": plan_fifo(lengths, capacity),
        "greedy-pack": plan_greedy_sorted(lengths, capacity),
    }

    def run_single():
        for s in batch.sequences:
            idx = np.arange(s.shape[0])[None]
            x = s[None]
            mamba_block_packed(x, params, idx)
            mamba_block_backward(x, params, idx, np.ones_like(x))

    rows = []
    for name, plan in layouts.items():
        if plan is None:
            fn, slots, rate = run_single, sum(lengths), 0.0
        else:
            pk = pack(batch, plan)
            dout = np.ones_like(pk.data)

            def fn(pk=pk, dout=dout):
                mamba_block_packed(pk.data, params, pk.position_indices)
                mamba_block_backward(pk.data, params, pk.position_indices, dout)
            slots, rate = plan.total_slots, padding_rate(plan)
        t = _median_time(fn, args.repeats)
        rows.append({"layout": name, "slots": slots, "padding_rate": rate, "fwd_bwd_seconds": t,
                     "tokens_per_second": sum(lengths) / t})
    doc = {"environment": {"precision": args.precision, "threads": args.threads, "seed": args.seed,
                           "model": model.name, "sequences": len(lengths)}, "rows": rows}
    _emit(args, rows, doc)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="packmamba",
                                     description="Sequence packing for selective-scan models.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-lengths", help="sample sequence lengths")
    _common(p)
    _length_flags(p)
    p.set_defaults(func=cmd_gen_lengths)

    p = sub.add_parser("compare-strategies", help="padding rate and FLOPs per packing strategy")
    _common(p)
    _length_flags(p)
    p.add_argument("--capacity", type=int, default=4096)
    p.add_argument("--pad-capacity", type=int, help="padded length for the pad-to-max baseline (default: longest sequence)")
    p.add_argument("--model", default="mamba-1.4b")
    p.add_argument("--omit-timing", action="store_true", help="drop wall times for byte-stable output")
    p.set_defaults(func=cmd_compare)

    p = sub.add_parser("profile-scan", help="time parallel_scan across sequence lengths")
    _common(p)
    p.add_argument("--lengths", default=DEFAULT_PROFILE_LENGTHS, help="comma-separated sweep")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--states", type=int, default=16)
    p.add_argument("--repeats", type=int, default=5)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("flops", help="analytic FLOPs for padded vs packed layouts")
    _common(p)
    _length_flags(p)
    p.add_argument("--capacity", type=int, default=4096)
    p.add_argument("--pad-capacity", type=int, help="padded length for the baseline (default: longest sequence)")
    p.add_argument("--model", default="mamba-1.4b")
    p.set_defaults(func=cmd_flops)

    p = sub.add_parser("verify", help="run the invariant suites")
    _common(p)
    p.add_argument("--suite", choices=("pui", "gradients", "scan-oracle", "isolation", "all"), default="all")
    p.add_argument("--tolerance", action="append", metavar="KEY=VALUE",
                   help=f"override a tolerance ({', '.join(DEFAULT_TOLERANCES)})")
    p.add_argument("--inject-fault", choices=("unmasked-conv",), help="swap in a known-bad operator")
    p.add_argument("--scale", type=float, default=1.0, help="multiply trial counts")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("bench", help="packed vs padded vs single-sequence block fwd+bwd timing")
    _common(p)
    _length_flags(p, kind="uniform-range", min_len=8, max_len=128, count=16)
    p.add_argument("--capacity", type=int, default=256)
    p.add_argument("--model", default="desk")
    p.add_argument("--repeats", type=int, default=3)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if not 0 <= args.seed < 2 ** 64:
        raise SystemExit("--seed must be an unsigned 64-bit integer")
    set_num_threads(args.threads)
    try:
        return args.func(args)
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
