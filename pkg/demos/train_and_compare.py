"""Train REINFORCE and RAR-A side by side on a short budget, then compare.

The same thing is available from the command line::

    rarlab train --method reinforce --seeds 0,1,2 --iterations 300 --out demo_runs/reinforce
    rarlab train --method rar_a     --seeds 0,1,2 --iterations 300 --out demo_runs/rar_a
    rarlab compare demo_runs/reinforce demo_runs/rar_a

Early in training the rank loss tends to help most; see README for the full-length runs.
"""
import argparse
from pathlib import Path

from rarlab.harness import ExperimentConfig, compare_runs, default_workers, run_training


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--out", default="demo_runs")
    parser.add_argument("--iterations", type=int, default=300)
    parser.add_argument("--seeds", default="0,1,2")
    parser.add_argument("--methods", default="reinforce,rar_a")
    args = parser.parse_args()

    dirs = []
    for method in args.methods.split(","):
        cfg = ExperimentConfig.from_strings(dict(
            method=method, seeds=args.seeds, out=str(Path(args.out) / method),
            iterations=str(args.iterations), eval_every="100", eval_students="100"))
        print(f"training {method} on seeds {cfg.seeds} (config {cfg.config_hash()})")
        run_training(cfg, workers=default_workers())
        dirs.append(cfg.out)

    print()
    print(compare_runs(dirs).format(), end="")


if __name__ == "__main__":
    main()
