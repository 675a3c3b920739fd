"""Pointer and attention heatmaps of a detector before and after an IP attack.

    python scripts/pointer_heatmaps.py --checkpoint runs/train/model.npz --out runs/heatmaps
"""

import argparse
from pathlib import Path

import torch

from pointerpatch.attack.engine import AttackConfig, DetectorSurface, run_attack
from pointerpatch.attack.perturbation import PerturbationState, apply_perturbation
from pointerpatch.attack.plan import make_plan
from pointerpatch.data.shapes import SceneSpec, generate_dataset
from pointerpatch.evaluation import export_heatmaps
from pointerpatch.io import write_rgb_png
from pointerpatch.training import load_detector


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--checkpoint", type=Path, required=True)
    parser.add_argument("--out", type=Path, default=Path("runs/heatmaps"))
    parser.add_argument("--iterations", type=int, default=100)
    args = parser.parse_args()

    model = load_detector(args.checkpoint)
    data = generate_dataset(SceneSpec(seed=0), 400, start=100_000)
    train, held_out = data[:360], data[360:]
    targets = min(4, model.config.num_points)
    plan = make_plan("IP", model.config.image_size, num_sources=4, num_targets=targets, patch_edge=12, target_edge=6)
    art = run_attack(model, train, held_out, plan,
                     AttackConfig(strategy="IP", max_iterations=args.iterations, eval_every=args.iterations,
                                  stop_on_zero_robust_metric=False), out_dir=args.out / "attack")
    surface = DetectorSurface(model)
    src_mask, tgt_mask = surface.masks(plan)
    state = PerturbationState(torch.from_numpy(art.frames["source"]), None, src_mask, tgt_mask)
    image = surface.images(held_out[:1])
    patched = apply_perturbation(image, state, "IP")
    for name, x in (("clean", image), ("patched", patched)):
        with torch.no_grad():
            _, traces = model(x)
        export_heatmaps(traces, model.config.image_size, args.out, prefix=name)
        write_rgb_png(args.out / f"{name}_image.png", x[0].numpy())
    print(f"pointer distance {art.initial['pointer_distance']:.4f} -> {art.final['pointer_distance']:.4f}; "
          f"attention mass {art.initial['attention_mass']:.4f} -> {art.final['attention_mass']:.4f}")


if __name__ == "__main__":
    main()
