"""Command-line front end: run, instrument, compare, dump-trace, storage, workload."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .boss import storage_bytes
from .ir import AssemblyError, disassemble
from .structured import LoweringError, lower, parse_structured

EXIT_OK, EXIT_CONFIG, EXIT_SIM, EXIT_REJECT = 0, 2, 3, 4


def _read(path: str) -> str:
    if path == "-":
        return sys.stdin.read()
    with open(path) as fh:
        return fh.read()


def cmd_run(args) -> int:
    from .report import ConfigError, load_experiment, run_experiment
    try:
        exp = load_experiment(args.config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.output:
        exp.output = args.output
    report = run_experiment(exp)
    sys.stdout.write(report.summary())
    statuses = [r["status"] for r in report.rows]
    if any(s == "failed" for s in statuses):
        return EXIT_SIM
    if any(s.startswith("rejected") for s in statuses):
        return EXIT_REJECT
    return EXIT_OK


def cmd_instrument(args) -> int:
    from .instrument import InstrumentOptions, instrument, parse_range, parse_variant
    try:
        sp = parse_structured(_read(args.input))
        kind, factor = parse_variant(args.variant)
        opts = InstrumentOptions(channel=args.channel, variant=kind, factor=factor,
                                 coverage=parse_range(args.range) if args.range else None,
                                 placement=args.placement)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    res = instrument(sp, args.target, opts)
    if res.program is not None:
        text = disassemble(res.program)
        if args.output:
            with open(args.output, "w") as fh:
                fh.write(text)
        else:
            sys.stdout.write(text)
    if res.diagnostic is not None:
        print(f"error[{res.diagnostic.code}]: {res.diagnostic}", file=sys.stderr)
        if res.program is not None:
            print("note: output is the original program, unchanged", file=sys.stderr)
        return EXIT_REJECT
    return EXIT_OK


def cmd_compare(args) -> int:
    from .report import COMPARE_COLUMNS, compare, rows_to_csv, table
    try:
        reports = [json.loads(_read(p)) for p in args.reports]
        rows = compare(reports)
    except (OSError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    sys.stdout.write(table(rows, COMPARE_COLUMNS))
    if args.csv:
        with open(args.csv, "w") as fh:
            fh.write(rows_to_csv(rows, COMPARE_COLUMNS))
    return EXIT_OK


def cmd_dump_trace(args) -> int:
    from .oracle import dump_trace, execute
    try:
        prog = lower(parse_structured(_read(args.input)))
    except (OSError, AssemblyError, LoweringError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    trace = execute(prog, args.step_limit)
    sys.stdout.write(dump_trace(trace))
    if args.boss_log or args.stats:
        from .frontend import CoreConfig, run_sim
        from .predictors import make_predictor
        res = run_sim(prog, make_predictor(args.predictor), CoreConfig(step_limit=args.step_limit))
        if args.boss_log:
            with open(args.boss_log, "w") as fh:
                fh.write("".join(e.line() + "\n" for e in res.log))
        if args.stats:
            sys.stderr.write(res.stats.key_values())
    if trace.status == "fault":
        print(f"fault at {trace.fault_addr:#x}", file=sys.stderr)
        return EXIT_SIM
    return EXIT_OK if trace.halted else EXIT_SIM


def cmd_storage(args) -> int:
    try:
        print(storage_bytes(args.channels, args.iters))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def cmd_workload(args) -> int:
    from .workloads import WorkloadSpec, build
    try:
        spec = WorkloadSpec(kind=args.kind, trip=args.trip, generations=args.generations, seed=args.seed,
                            bias=args.bias, repeat_prob=args.repeat_prob, corr_prob=args.corr_prob,
                            chain_depth=args.chain_depth, placement=args.placement, filler=args.filler)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    w = build(spec)
    if args.output:
        with open(args.output, "w") as fh:
            fh.write(w.source)
    else:
        sys.stdout.write(w.source)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="boss-sim", description="BOSS branch-outcome side-channel simulator")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("config")
    p.add_argument("-o", "--output", help="directory for report.csv/json and summary.txt")
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("instrument", help="insert a pre-execute loop for a target branch")
    p.add_argument("input")
    p.add_argument("--target", required=True, help="label on the target branch")
    p.add_argument("--variant", default="plain", help="plain | unroll:N | vec:W")
    p.add_argument("--range", help="coverage n:m (inclusive iteration indices)")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--placement", choices=("earliest", "late"), default="earliest")
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_instrument)

    p = sub.add_parser("compare", help="align report.json files")
    p.add_argument("reports", nargs="+")
    p.add_argument("--csv")
    p.set_defaults(fn=cmd_compare)

    p = sub.add_parser("dump-trace", help="oracle trace of a program, one event per line")
    p.add_argument("input")
    p.add_argument("--step-limit", type=int, default=10_000_000)
    p.add_argument("--boss-log", help="also simulate and write the BOSS event log here")
    p.add_argument("--stats", action="store_true", help="also simulate and print key=value stats to stderr")
    p.add_argument("--predictor", default="tage")
    p.set_defaults(fn=cmd_dump_trace)

    p = sub.add_parser("storage", help="BOSS storage budget in bytes")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--iters", type=int, default=256)
    p.set_defaults(fn=cmd_storage)

    p = sub.add_parser("workload", help="emit a generated workload as .bss text")
    p.add_argument("--kind", default="synthetic")
    p.add_argument("--trip", type=int, default=4)
    p.add_argument("--generations", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bias", type=float, default=0.5)
    p.add_argument("--repeat-prob", type=float, default=0.93)
    p.add_argument("--corr-prob", type=float, default=1.0)
    p.add_argument("--chain-depth", type=int, default=1)
    p.add_argument("--placement", default="hot")
    p.add_argument("--filler", type=int, default=200)
    p.add_argument("-o", "--output")
    p.set_defaults(fn=cmd_workload)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
