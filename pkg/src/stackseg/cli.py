"""Command-line entry point: ``stackseg <subcommand> [--config PATH] [--seed N] [--out DIR]``."""

from __future__ import annotations

import argparse
import sys

from .config import load_config
from .errors import StackSegError, StageError
from .pipeline import STAGES, Run, compare_runs


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (sectioned key = value)")
    common.add_argument("--seed", type=int, help="run seed, overrides [run] seed")
    common.add_argument("--out", help="run directory, overrides [run] out")

    ap = argparse.ArgumentParser(prog="stackseg", description="stacked 2D/3D segmentation ensembles")
    sub = ap.add_subparsers(dest="command", required=True)
    for stage in STAGES[:-1]:
        p = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        p.add_argument("--force", action="store_true", help="recompute even if the stage is up to date")
    rp = sub.add_parser("report", parents=[common], help="render a run's report, or compare several runs")
    rp.add_argument("runs", nargs="*", help="completed run directories to compare (one row each)")
    rp.add_argument("--method", default="meta", help="method row taken from each run when comparing")
    run = sub.add_parser("run", parents=[common], help="run every stage, resuming finished ones")
    run.add_argument("--stage", choices=STAGES, default="report", help="last stage to run")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report" and args.runs:
            md, _ = compare_runs(args.runs, args.out, args.method)
            sys.stdout.write(md)
            return 0
        cfg = load_config(args.config, args.seed, args.out)
        r = Run(cfg)
        if args.command == "run":
            ran = r.run(args.stage)
            print(f"{r.root}: ran {', '.join(ran) if ran else 'nothing (up to date)'}")
        else:
            did = r.run_stage(args.command, force=getattr(args, "force", False))
            print(f"{r.root}: {args.command} {'done' if did else 'up to date'}")
        if args.command in ("run", "report") and r.path("report.md").exists():
            sys.stdout.write(r.path("report.md").read_text())
        return 0
    except StageError as exc:
        print(f"stackseg: error: {exc}", file=sys.stderr)
        return 2
    except StackSegError as exc:
        print(f"stackseg: error: [{args.command}] {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
