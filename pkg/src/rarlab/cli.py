"""Command line: ``rarlab train | evaluate | compare``."""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .harness import (ConfigError, ExperimentConfig, compare_runs, default_workers,
                      evaluate_checkpoint, parse_int_list, rerun_manifest, run_training)
from .simulator import SimConfig
from .training import eval_seeds


def _add_train(sub) -> None:
    p = sub.add_parser("train", help="train one method over a list of seeds")
    p.add_argument("--config", help="key = value file with any of the flags below")
    p.add_argument("--from-manifest", metavar="MANIFEST",
                   help="re-run the seed recorded in a manifest.json (needs --out)")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel processes across seeds (0 = one per available CPU)")
    for f in fields(ExperimentConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, metavar=f.name.upper(), default=None,
                       help=f"default: {_show(f.default)}")


def _show(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _cmd_train(args) -> int:
    overrides = {f.name: getattr(args, f.name) for f in fields(ExperimentConfig)
                 if getattr(args, f.name) is not None}
    if args.from_manifest:
        if "out" not in overrides or len(overrides) > 1:
            print("error: --from-manifest takes only --out", file=sys.stderr)
            return 2
        out = rerun_manifest(args.from_manifest, overrides["out"])
        print(f"wrote {out}")
        return 0
    base = ExperimentConfig.load(args.config) if args.config else None
    cfg = ExperimentConfig.from_strings(overrides, base, Path.cwd())
    workers = default_workers() if args.workers == 0 else args.workers
    for out in run_training(cfg, workers):
        print(f"wrote {out}")
    return 0


def _cmd_evaluate(args) -> int:
    env = SimConfig.load(args.env) if args.env else None
    if args.seeds:
        seeds = parse_int_list(args.seeds)
    else:
        seeds = eval_seeds(args.students)
    greedy = True if args.greedy else (False if args.sample else None)
    table = evaluate_checkpoint(args.checkpoint, env, seeds, parse_int_list(args.steps), greedy)
    print(table.format())
    return 0


def _cmd_compare(args) -> int:
    report = compare_runs(args.runs, t=args.t).format()
    if args.out:
        Path(args.out).write_text(report)
    print(report, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rarlab", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_train(sub)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on held-out students")
    p.add_argument("checkpoint", help="checkpoint.bin or a seed directory containing one")
    p.add_argument("--env", help="simulator config file (default: built-in)")
    p.add_argument("--seeds", help="comma-separated student seeds (default: held-out set)")
    p.add_argument("--students", type=int, default=200, help="size of the held-out set")
    p.add_argument("--steps", default="10,30", help="comma-separated t values")
    mode = p.add_mutually_exclusive_group()
    mode.add_argument("--greedy", action="store_true", help="act by argmax")
    mode.add_argument("--sample", action="store_true", help="sample from the policy")

    p = sub.add_parser("compare", help="side-by-side report of two or more runs")
    p.add_argument("runs", nargs="+", help="run directories (as passed to train --out)")
    p.add_argument("--t", type=int, default=30, help="step count for the per-seed table")
    p.add_argument("--out", help="also write the report to this file")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    handler = {"train": _cmd_train, "evaluate": _cmd_evaluate, "compare": _cmd_compare}
    try:
        return handler[args.command](args)
    except ConfigError as exc:
        print(f"error: invalid config field {exc}", file=sys.stderr)
        return 2
    except (ValueError, FileNotFoundError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
