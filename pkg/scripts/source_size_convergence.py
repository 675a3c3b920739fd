"""Final combined IP loss after a fixed budget for growing source patches.

    python scripts/source_size_convergence.py --checkpoint runs/train/model.npz

Prints one row per seed and writes ``convergence.csv`` and ``convergence.png``.
"""

import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from pointerpatch.attack.engine import AttackConfig, run_attack
from pointerpatch.attack.plan import PatchPlan
from pointerpatch.data.shapes import SceneSpec, generate_dataset
from pointerpatch.io import write_csv
from pointerpatch.training import load_detector


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--out", type=Path, default=Path("runs/convergence"))
    parser.add_argument("--sizes", type=int, nargs="+", default=[8, 16, 32])
    parser.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    parser.add_argument("--iterations", type=int, default=50)
    args = parser.parse_args()

    model = load_detector(args.checkpoint)
    data = generate_dataset(SceneSpec(seed=0), 400, start=100_000)
    train, held_out = data[:360], data[360:]
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    fig, ax = plt.subplots(figsize=(5, 4))
    for seed in args.seeds:
        finals = []
        for size in args.sizes:
            # source grows from a fixed corner near the center; 6px target near the top-left
            plan = PatchPlan([(28 / 64, 28 / 64)], [(6 / 64, 6 / 64)], patch_edge=size, target_edge=6)
            art = run_attack(model, train, held_out, plan,
                             AttackConfig(strategy="IP", seed=seed, max_iterations=args.iterations,
                                          eval_every=args.iterations, stop_on_zero_robust_metric=False))
            finals.append(art.history[-1]["combined"])
            rows.append({"seed": seed, "source_edge": size, "final_loss": finals[-1]})
        print(f"seed {seed}: " + "  ".join(f"{s}px {v:.4f}" for s, v in zip(args.sizes, finals)))
        ax.plot(args.sizes, finals, "o-", label=f"seed {seed}")
    ax.set(xlabel="source patch edge (px)", ylabel=f"combined loss after {args.iterations} it.")
    ax.legend()
    fig.tight_layout()
    fig.savefig(args.out / "convergence.png", dpi=100)
    write_csv(args.out / "convergence.csv", rows, ["seed", "source_edge", "final_loss"])


if __name__ == "__main__":
    main()
