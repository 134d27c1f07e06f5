"""Command-line front end: sweeps, dataset dumps, inference benchmarks.

Exit codes: 0 success, 2 configuration error, 3 training failure (some
model diverged on every cell of the sweep).
"""
from __future__ import annotations

import argparse
import json
import sys

from .datagen import REGIMES, dump_split_csv, gen_split
from .distill import load_student
from .harness import (_param_count_any, config_from_dict, emit_report,
                      measure_latency, run_sweep)
from .pkn import load_teacher


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="pkd-lab",
        description="Prior-knowledge distillation lab: noise sweeps over "
                    "synthetic regimes or a real price series.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a sweep described by a JSON config")
    run.add_argument("--config", required=True, help="ExperimentConfig JSON")
    run.add_argument("--out", required=True, help="report output directory")
    run.add_argument("--threads", type=int, default=1,
                     help="worker threads for sweep cells")
    run.add_argument("--quiet", action="store_true",
                     help="suppress per-cell progress lines")

    gen = sub.add_parser("gen", help="write a synthetic dataset as CSV")
    gen.add_argument("--regime", required=True, choices=REGIMES)
    gen.add_argument("--noise", type=float, default=0.0)
    gen.add_argument("--lag-noise", type=int, default=0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.add_argument("--sizes", type=int, nargs=3, default=(3000, 300, 300),
                     metavar=("TRAIN", "VALID", "TEST"))

    bench = sub.add_parser("bench", help="time single-window inference")
    bench.add_argument("--model", required=True,
                       help="model JSON written by the library")
    bench.add_argument("--n", type=int, default=1000)
    return p


def cmd_run(args) -> int:
    try:
        with open(args.config) as fh:
            doc = json.load(fh)
        cfg = config_from_dict(doc)
    except (OSError, json.JSONDecodeError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    log = None if args.quiet else (lambda s: print(s, file=sys.stderr))
    report = run_sweep(cfg, threads=args.threads, log=log)
    try:
        paths = emit_report(report, args.out)
    except OSError as exc:
        print(f"cannot write report: {exc}", file=sys.stderr)
        return 2
    if not args.quiet:
        print(f"wrote {paths['json']}", file=sys.stderr)
    dead = [m for m in cfg.models
            if all(c.failed for c in report.cells if c.model == m)]
    if dead:
        print(f"training failed on every cell for: {', '.join(dead)}",
              file=sys.stderr)
        return 3
    return 0


def cmd_gen(args) -> int:
    try:
        data = gen_split(args.regime, noise_level=args.noise,
                         lag_noise=args.lag_noise, seed=args.seed,
                         sizes=tuple(args.sizes))
        dump_split_csv(data, args.out)
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


def cmd_bench(args) -> int:
    loaders = {"pkn-teacher": load_teacher, "pkdn-student": load_student}
    try:
        with open(args.model) as fh:
            kind = json.load(fh).get("kind", "")
        if kind not in loaders:
            raise ValueError(f"unknown model kind {kind!r}")
        model = loaders[kind](args.model)
        stats = measure_latency(model, n=args.n)
    except (OSError, json.JSONDecodeError, ValueError, KeyError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    print(f"{kind}: {stats.mean_us:.1f} +/- {stats.std_us:.1f} us per "
          f"window over {stats.n} runs, {_param_count_any(model)} parameters")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return {"run": cmd_run, "gen": cmd_gen, "bench": cmd_bench}[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
