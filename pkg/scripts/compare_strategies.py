"""Run every attack strategy against one detector and overlay their curves.

    python scripts/compare_strategies.py --checkpoint runs/train/model.npz --out runs/strategies

Without --checkpoint a detector is trained first (about 4 minutes on CPU).
"""

import argparse
import copy
import logging
from pathlib import Path

from pointerpatch.config import ExperimentConfig
from pointerpatch.runner import emit_report, prepare_run_dir, run_command, train_model
from pointerpatch.training import load_detector

PLANS = {
    "IP": dict(num_sources=4, num_targets=4, patch_edge=12, target_edge=6),
    "OP": dict(num_sources=4, num_targets=4, patch_edge=12, target_edge=6),
    "SP": dict(num_sources=0, num_targets=1, patch_edge=6),
    "CP": dict(num_sources=1, num_targets=1, patch_edge=4),
    "ATT": dict(num_sources=0, num_targets=1, patch_edge=6),
}


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint", type=Path)
    parser.add_argument("--out", type=Path, default=Path("runs/strategies"))
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--iterations", type=int, default=100)
    parser.add_argument("--force", action="store_true")
    args = parser.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    out = prepare_run_dir(args.out, args.force)
    base = ExperimentConfig(command="attack", seed=args.seed)
    if args.checkpoint is None:
        _, path = train_model(base, out)
        args.checkpoint = path
    base.checkpoint = str(args.checkpoint)
    num_points = load_detector(args.checkpoint).config.num_points
    base.attack.max_iterations = args.iterations
    base.attack.eval_every = 10

    dirs = []
    for strategy, plan in PLANS.items():
        cfg = copy.deepcopy(base)
        cfg.attack.strategy = strategy
        cfg.attack.stop_on_zero_robust_metric = strategy in ("SP", "CP", "ATT")
        for k, v in plan.items():
            setattr(cfg.plan, k, v)
        cfg.plan.num_targets = min(cfg.plan.num_targets, num_points)
        dirs.append(run_command(cfg, out / strategy, force=True))
    for row in emit_report(dirs, out):
        print(f"{row['strategy']:>4}  AP {row['initial_metric']:.3f} -> {row['final_metric']:.3f}  {row['plan']}")


if __name__ == "__main__":
    main()
