"""The attack loop: optimize perturbation frames for one of the five strategies.

Loss components per strategy and the frame each one drives:

======  ===========================  ==================
IP      E: L_in, L_att
OP      E: L_out, L_att
SP      F: L_in, L_att, -L_model
CP      E: L_in, L_att                F: -L_model
ATT     F: L_att_baseline
======  ===========================  ==================

Components that drive the same frame are combined with PCGrad. A frame only
receives gradients of its own components.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from ..criterion import make_targets, model_loss
from ..detector import DeformableDetector
from ..evaluation import (attention_mass_to_target, average_precision, decode_detections,
                          mean_pointer_target_distance, pointer_redirect_fraction)
from ..io import write_csv, write_json, write_rgb_png
from .losses import loss_att_baseline, loss_attention, loss_inward, loss_outward
from .pcgrad import aggregate_source_gradients, project_conflicting
from .perturbation import PerturbationState, apply_perturbation
from .plan import STRATEGIES, PatchPlan, PlanError, build_mask, extend_targets, to_pixels, uses_source, uses_target

log = logging.getLogger(__name__)

AGGREGATORS = ("none", "mean", "max_norm")
HISTORY_FIELDS = ["iteration", "lr", "loss_in", "loss_out", "loss_att", "loss_model",
                  "loss_att_baseline", "combined", "metric", "pointer_distance",
                  "redirect_fraction", "attention_mass"]


class AttackDiverged(RuntimeError):
    pass


@dataclass
class AttackConfig:
    strategy: str = "CP"
    learning_rate: float = 0.22
    gamma: float = 0.95
    step_size: int = 10
    max_iterations: int = 100
    stop_on_zero_robust_metric: bool = True
    aggregator: str = "none"
    seed: int = 0
    batch_size: int = 4
    use_pcgrad: bool = True
    eval_every: int = 1

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must be in (0, 1]")
        if self.max_iterations < 1 or self.step_size < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ValueError("max_iterations, step_size, batch_size and eval_every must be >= 1")
        if self.aggregator not in AGGREGATORS:
            raise ValueError(f"unknown aggregator {self.aggregator!r}")


@dataclass
class AttackArtifacts:
    patches: Dict[str, np.ndarray]
    frames: Dict[str, np.ndarray]
    history: List[dict]
    initial: dict
    final: dict
    metadata: dict = field(default_factory=dict)
    stopped_early: bool = False

    @property
    def iterations(self) -> int:
        return len(self.history)


class DetectorSurface:
    """Single-view attack surface around a ``DeformableDetector``."""

    metric_name = "ap"

    def __init__(self, model: DeformableDetector, eval_batch: int = 40):
        self.model = model
        self.eval_batch = eval_batch
        h, w = model.config.image_size
        self.spatial = (h, w)
        self.frame_shape = (3, h, w)
        self.num_points = model.config.num_points

    def images(self, samples) -> torch.Tensor:
        return torch.from_numpy(np.stack([s.image for s in samples]))

    def forward(self, images, capture=True):
        return self.model(images, capture=capture)

    def model_loss(self, output, samples):
        return model_loss(output, make_targets(samples), include_aux=True)

    def evaluate(self, images, samples, capture=True):
        dets, traces = [], []
        with torch.no_grad():
            for i in range(0, len(images), self.eval_batch):
                out, tr = self.model(images[i:i + self.eval_batch], capture=capture)
                dets.extend(decode_detections(out))
                traces.extend(tr)
        truth = [{"boxes": s.boxes, "labels": s.labels} for s in samples]
        return average_precision(dets, truth), traces

    def masks(self, plan: PatchPlan):
        h, w = self.spatial
        def mask(locs, edge):
            if not locs:
                return torch.zeros(h, w)
            return torch.from_numpy(build_mask([to_pixels(l, (h, w)) for l in locs], edge, (h, w))).float()
        return mask(plan.source_locations, plan.patch_edge), mask(plan.target_locations, plan.target_patch_edge)

    def placements(self, plan: PatchPlan, role: str):
        """``(index, view or None, row, col)`` pixel corners of each patch in ``role``."""
        locs = plan.source_locations if role == "source" else plan.target_locations
        return [(k, None) + to_pixels(l, self.spatial) for k, l in enumerate(locs)]

    def target_points(self, plan: PatchPlan) -> np.ndarray:
        return plan.target_points(self.spatial)

    def target_rects(self, plan: PatchPlan):
        return plan.target_rects_normalized(self.spatial)


class _Frame:
    """One optimized perturbation frame, optionally a universal patch pasted at
    several placements."""

    def __init__(self, role, shape, placements, edge, aggregator):
        self.role = role
        self.shape = shape
        self.placements = placements
        self.edge = edge
        self.universal = aggregator != "none" and len(placements) > 0
        self.aggregator = aggregator
        channels = shape[-3]
        if self.universal:
            self.param = torch.zeros(channels, edge, edge, requires_grad=True)
        else:
            self.param = torch.zeros(shape, requires_grad=True)
        self.last_choice = None

    def build(self) -> torch.Tensor:
        if not self.universal:
            return self.param
        frame = torch.zeros(self.shape)
        e = self.edge
        for _, view, r, c in self.placements:
            target = frame if view is None else frame[view]
            target[:, r:r + e, c:c + e] = self.param
        return frame

    def set_grad(self, frame_grad: torch.Tensor):
        if not self.universal:
            self.param.grad = frame_grad.reshape(self.shape).clone()
            return
        e = self.edge
        per = []
        for _, view, r, c in self.placements:
            g = frame_grad if view is None else frame_grad[view]
            per.append(g[:, r:r + e, c:c + e])
        agg, self.last_choice = aggregate_source_gradients(per, self.aggregator)
        self.param.grad = agg.clone()

    def value(self) -> torch.Tensor:
        with torch.no_grad():
            return self.build().detach().clone()


def _components(strategy):
    """Map frame role -> list of loss component names."""
    return {
        "IP": {"source": ["in", "att"]},
        "OP": {"source": ["out", "att"]},
        "SP": {"target": ["in", "att", "neg_model"]},
        "CP": {"source": ["in", "att"], "target": ["neg_model"]},
        "ATT": {"target": ["att_baseline"]},
    }[strategy]


def compute_losses(surface, images, samples, state, strategy, targets_ext, target_rects):
    """Forward ``images`` under ``state`` and return ``{name: loss}`` for ``strategy``."""
    x = apply_perturbation(images, state, strategy)
    out, traces = surface.forward(x, capture=True)
    needed = {c for comps in _components(strategy).values() for c in comps}
    losses = {}
    if "in" in needed:
        losses["in"] = loss_inward(traces, targets_ext)
    if "out" in needed:
        losses["out"] = loss_outward(traces, targets_ext)
    if "att" in needed:
        losses["att"] = loss_attention(traces)
    if "neg_model" in needed:
        losses["neg_model"] = -surface.model_loss(out, samples)
    if "att_baseline" in needed:
        losses["att_baseline"] = loss_att_baseline(traces, target_rects)
    return losses


def run_attack(model_or_surface, train_set: Sequence, eval_set: Sequence, plan: PatchPlan,
               config: AttackConfig, out_dir=None, model_id: Optional[str] = None) -> AttackArtifacts:
    """Optimize the strategy's frames on ``train_set``; track the robust metric on ``eval_set``.

    Stops after ``max_iterations`` steps or once the metric on ``eval_set``
    reaches zero (if enabled). Writes artifacts to ``out_dir`` when given.
    """
    surface = (DetectorSurface(model_or_surface) if isinstance(model_or_surface, DeformableDetector)
               else model_or_surface)
    strategy = config.strategy
    plan.validate(strategy, surface.spatial, surface.num_points)
    if strategy == "CP" and (not plan.source_locations or not plan.target_locations):
        raise PlanError("CP needs both source and target locations")

    model = getattr(surface, "model", None)
    saved_flags = []
    if model is not None:
        model.eval()
        for p in model.parameters():
            saved_flags.append(p.requires_grad)
            p.requires_grad_(False)

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    source_mask, target_mask = surface.masks(plan)
    comps = _components(strategy)
    agg_role = "source" if uses_source(strategy) else "target"
    frames = {}
    for role in comps:
        edge = plan.patch_edge if role == "source" else plan.target_patch_edge
        frames[role] = _Frame(role, surface.frame_shape, surface.placements(plan, role), edge,
                              config.aggregator if role == agg_role else "none")
    params = [f.param for f in frames.values()]
    opt = torch.optim.Adam(params, lr=config.learning_rate)
    sched = torch.optim.lr_scheduler.StepLR(opt, step_size=config.step_size, gamma=config.gamma)

    target_points = surface.target_points(plan)
    targets_ext = torch.as_tensor(np.asarray(extend_targets(list(target_points), surface.num_points))) \
        if strategy != "ATT" else None
    target_rects = surface.target_rects(plan)
    train_images = surface.images(train_set)
    eval_images = surface.images(eval_set)

    def state():
        return PerturbationState(
            frames["source"].build() if "source" in frames else None,
            frames["target"].build() if "target" in frames else None,
            source_mask, target_mask)

    def evaluate():
        with torch.no_grad():
            x = apply_perturbation(eval_images, state(), strategy)
            metric, traces = surface.evaluate(x, eval_set)
        return {"metric": float(metric),
                "pointer_distance": mean_pointer_target_distance(traces, target_points),
                "redirect_fraction": pointer_redirect_fraction(traces, target_rects),
                "attention_mass": attention_mass_to_target(traces, target_rects)}

    start = time.time()
    initial = evaluate()
    history: List[dict] = []
    order = rng.permutation(len(train_set))
    cursor = 0
    stopped = False
    last_eval = dict(initial)
    try:
        for it in range(config.max_iterations):
            if cursor + config.batch_size > len(order):
                order = rng.permutation(len(train_set))
                cursor = 0
            idx = order[cursor:cursor + config.batch_size]
            cursor += config.batch_size
            batch = [train_set[i] for i in idx]
            built = {role: f.build() for role, f in frames.items()}
            st = PerturbationState(built.get("source"), built.get("target"), source_mask, target_mask)
            losses = compute_losses(surface, train_images[idx], batch, st, strategy, targets_ext, target_rects)
            for name, value in losses.items():
                if not torch.isfinite(value):
                    raise AttackDiverged(f"iteration {it + 1}: loss {name} is {value.item()}")
            opt.zero_grad()
            for role, names in comps.items():
                grads = []
                for name in names:
                    g, = torch.autograd.grad(losses[name], built[role], retain_graph=True, allow_unused=True)
                    grads.append(torch.zeros_like(built[role]) if g is None else g)
                flat = [g.reshape(-1) for g in grads]
                if len(flat) > 1 and config.use_pcgrad:
                    flat = project_conflicting(flat, rng)
                frames[role].set_grad(torch.stack(flat).sum(0).reshape(built[role].shape))
            lr = opt.param_groups[0]["lr"]
            opt.step()
            sched.step()

            row = {"iteration": it + 1, "lr": lr}
            for name, col in (("in", "loss_in"), ("out", "loss_out"), ("att", "loss_att"),
                              ("att_baseline", "loss_att_baseline")):
                row[col] = float(losses[name].detach()) if name in losses else None
            row["loss_model"] = -float(losses["neg_model"].detach()) if "neg_model" in losses else None
            row["combined"] = float(sum(float(v.detach()) for v in losses.values()))
            if (it + 1) % config.eval_every == 0 or it + 1 == config.max_iterations:
                last_eval = evaluate()
            row.update(last_eval)
            history.append(row)
            if config.stop_on_zero_robust_metric and last_eval["metric"] <= 0:
                stopped = True
                break
    finally:
        if model is not None:
            for p, flag in zip(model.parameters(), saved_flags):
                p.requires_grad_(flag)

    frame_values = {role: f.value() for role, f in frames.items()}
    patches = _extract_patches(surface, plan, frame_values)
    final = dict(history[-1]) if history else dict(initial)
    final["iterations"] = len(history)
    final["seconds"] = round(time.time() - start, 3)
    meta = {
        "strategy": strategy,
        "plan": asdict(plan),
        "config": asdict(config),
        "seed": config.seed,
        "model_id": model_id,
        "metric_name": surface.metric_name,
        "initial_metrics": initial,
        "final_metrics": {k: v for k, v in final.items() if k != "seconds"},
        "stopped_early": stopped,
    }
    artifacts = AttackArtifacts(patches, {k: v.numpy() for k, v in frame_values.items()},
                                history, initial, final, meta, stopped)
    if out_dir is not None:
        write_artifacts(artifacts, out_dir)
    return artifacts


def _extract_patches(surface, plan, frame_values):
    patches = {}
    for role, frame in frame_values.items():
        edge = plan.patch_edge if role == "source" else plan.target_patch_edge
        for k, view, r, c in surface.placements(plan, role):
            f = frame if view is None else frame[view]
            name = f"{role}_{k}" if view is None else f"{role}_{k}_view{view}"
            patches[name] = f[:, r:r + edge, c:c + edge].clamp(0, 1).numpy()
    return patches


def write_artifacts(artifacts: AttackArtifacts, out_dir):
    """Patch PNGs + ``patches/metadata.json``, raw ``frames.npz``, ``history.csv``, ``metrics.json``."""
    out = Path(out_dir)
    (out / "patches").mkdir(parents=True, exist_ok=True)
    for name, patch in sorted(artifacts.patches.items()):
        write_rgb_png(out / "patches" / f"{name}.png", patch)
    write_json(out / "patches" / "metadata.json", artifacts.metadata)
    import io as _io
    from ..io import atomic_write_bytes
    buf = _io.BytesIO()
    np.savez(buf, **artifacts.frames)
    atomic_write_bytes(out / "frames.npz", buf.getvalue())
    rows = [dict(iteration=0, lr=None, **artifacts.initial)] + artifacts.history
    write_csv(out / "history.csv", rows, HISTORY_FIELDS)
    write_json(out / "metrics.json", {"initial": artifacts.initial,
                                      "final": {k: v for k, v in artifacts.final.items() if k != "seconds"},
                                      "stopped_early": artifacts.stopped_early,
                                      "strategy": artifacts.metadata.get("strategy"),
                                      "metric_name": artifacts.metadata.get("metric_name")})
