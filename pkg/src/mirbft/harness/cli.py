"""``mirbft`` command line: run, check and sweep scenarios."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .checker import check_trace
from .metrics import compute_metrics, emit_metrics
from .scenario import load_scenario, read_trace, run_scenario, trace_digest, write_trace


def _seed_range(text: str) -> range:
    if ".." in text:
        a, b = text.split("..", 1)
        return range(int(a), int(b) + 1)
    return range(int(text), int(text) + 1)


def cmd_run(args) -> int:
    sc = load_scenario(args.scenario)
    if args.seed is not None:
        sc = sc.with_seed(args.seed)
    res = run_scenario(sc)
    report = check_trace(res.trace)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_trace(res.trace, out / "trace.jsonl")
    metrics = compute_metrics(res.trace, window=args.window)
    emit_metrics(metrics, "json", out / "metrics.json")
    emit_metrics(metrics, "csv", out / "timeline.csv")
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
    print(f"{sc.name} seed={sc.seed} digest={trace_digest(res.trace)[:16]} {report.summary()}")
    print(
        f"delivered={metrics.delivered_total} unique={metrics.delivered_unique} "
        f"duplicates={metrics.duplicate_commits} goodput={metrics.goodput:.2f}/kt epochs={len(metrics.epochs)}"
    )
    return 0 if report.ok else 1


def cmd_check(args) -> int:
    report = check_trace(read_trace(args.trace))
    print(json.dumps(report.to_dict(), indent=2, sort_keys=True) if args.verbose else report.summary())
    return 0 if report.ok else 1


def cmd_sweep(args) -> int:
    sc = load_scenario(args.scenario)
    failures = 0
    for seed in _seed_range(args.seeds):
        res = run_scenario(sc.with_seed(seed))
        report = check_trace(res.trace)
        failures += not report.ok
        print(f"seed={seed} {report.summary()}")
    print(f"{failures} failing seeds")
    return 1 if failures else 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mirbft", description="Simulate and check multi-leader BFT scenarios.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="run one scenario and write trace, metrics and report")
    run.add_argument("--scenario", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", default="out")
    run.add_argument("--window", type=int, default=100, help="CSV time-series bucket width in ticks")
    run.set_defaults(func=cmd_run)

    chk = sub.add_parser("check", help="check a JSON-lines trace")
    chk.add_argument("--trace", required=True)
    chk.set_defaults(func=cmd_check)

    sw = sub.add_parser("sweep", help="run a scenario over a seed range, e.g. 1..50")
    sw.add_argument("--scenario", required=True)
    sw.add_argument("--seeds", required=True)
    sw.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
