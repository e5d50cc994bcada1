"""Command line: ``streamlab run | compare | presets list``."""

from __future__ import annotations

import argparse
import sys

from streamlab.core import ENCODING_PRESETS, ConfigError
from streamlab.harness import compare, default_out_dir, load_scenario, run_scenario
from streamlab.netem import NET_PRESETS


def _cmd_run(args) -> int:
    scenario = load_scenario(args.config)
    result = run_scenario(scenario, args.out, duration_scale=args.duration_scale, seed=args.seed,
                          workers=args.workers)
    root = f"{args.out}/{scenario.name}"
    for cell in result.cells:
        if cell.failure:
            print(f"FAILED {cell.network} {cell.protocol.label} {cell.profile}: {cell.failure}")
    print(f"{len(result.reports())} report rows written to {root}/report.csv")
    return 0 if result.ok else 1


def _cmd_compare(args) -> int:
    ok, results = compare(args.report, args.expectations)
    for r in results:
        print(r.line())
    n_pass = sum(r.status == "pass" for r in results)
    print(f"{n_pass}/{len(results)} assertions passed")
    return 0 if ok else 1


def _cmd_presets(args) -> int:
    print("encoding profiles:")
    for name, p in ENCODING_PRESETS.items():
        print(f"  {name:8} {p.width}x{p.height} {p.bitrate_kbps} kbps {p.fps} fps gop {p.gop_size}")
    print("networks:")
    for name, n in NET_PRESETS.items():
        jit = f"{n.jitter.kind} {n.jitter.amount_us / 1000:g} ms" if n.jitter.kind != "none" else "none"
        print(f"  {name:10} delay {n.one_way_delay_us / 1000:g} ms  jitter {jit}  loss {n.loss_rate:g}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="streamlab", description="Emulated live-streaming protocol benchmark")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario")
    run.add_argument("config", help="scenario JSON file")
    run.add_argument("--out", default=default_out_dir(), help="output directory (default $STREAMLAB_OUT)")
    run.add_argument("--duration-scale", type=float, default=1.0,
                     help="multiply every session duration (0.1 for a quick pass)")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--workers", type=int, default=1, help="worker processes for the session grid")
    run.set_defaults(fn=_cmd_run)

    cmp = sub.add_parser("compare", help="check a report against expectations")
    cmp.add_argument("report", help="report.csv written by run")
    cmp.add_argument("expectations", help="expectations JSON file")
    cmp.set_defaults(fn=_cmd_compare)

    pre = sub.add_parser("presets", help="show built-in presets")
    pre.add_argument("action", choices=["list"])
    pre.set_defaults(fn=_cmd_presets)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
