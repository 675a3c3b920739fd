"""Execute experiment configs: train, attack, eval, heatmap and sweeps, plus reports.

Every run writes a self-contained directory with the resolved ``config.yaml``.
"""

from __future__ import annotations

import logging
import shutil
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import torch

from .attack.engine import HISTORY_FIELDS, AttackConfig, DetectorSurface, run_attack
from .attack.perturbation import PerturbationState, apply_perturbation
from .attack.plan import PatchPlan, make_plan
from .config import ConfigError, ExperimentConfig, apply_axis, dump_config, load_config
from .data.multiview_scene import default_cameras, generate_multiview_dataset, save_cameras
from .data.shapes import generate_dataset
from .evaluation import export_heatmaps
from .io import read_checkpoint, read_csv, write_csv, write_gray_png, write_json
from .multiview import (MultiViewSurface, decode_world_heatmap, load_multiview, make_multiview_plan,
                        save_multiview, train_multiview_detector)
from .training import load_detector, save_detector, train_toy_detector

log = logging.getLogger(__name__)

REPORT_FIELDS = ["run", "strategy", "plan", "metric_name", "initial_metric", "final_metric",
                 "iterations", "stopped_early", "status"]


class RunDirectoryExists(ConfigError):
    pass


def prepare_run_dir(path, force: bool = False) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()):
        if not force:
            raise RunDirectoryExists(f"{out} already holds a run; pass --force to overwrite")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# -- data and models ---------------------------------------------------------

def detector_data(cfg: ExperimentConfig):
    d = cfg.data
    if cfg.multiview:
        cams = default_cameras(d.multiview_scene.num_views, d.multiview_scene.view_size,
                               seed=d.multiview_scene.camera_seed)
        data = generate_multiview_dataset(d.multiview_scene, d.detector_train_count + d.detector_eval_count,
                                          cameras=cams)
    else:
        data = generate_dataset(d.scene, d.detector_train_count + d.detector_eval_count)
    return data[:d.detector_train_count], data[d.detector_train_count:]


def attack_data(cfg: ExperimentConfig):
    d = cfg.data
    n = d.attack_train_count + d.attack_eval_count
    if cfg.multiview:
        cams = default_cameras(d.multiview_scene.num_views, d.multiview_scene.view_size,
                               seed=d.multiview_scene.camera_seed)
        data = generate_multiview_dataset(d.multiview_scene, n, start=d.attack_offset, cameras=cams)
    else:
        data = generate_dataset(d.scene, n, start=d.attack_offset)
    return data[:d.attack_train_count], data[d.attack_train_count:]


def train_model(cfg: ExperimentConfig, out_dir: Path):
    train, held_out = detector_data(cfg)
    start = time.time()
    if cfg.multiview:
        cams = default_cameras(cfg.data.multiview_scene.num_views, cfg.data.multiview_scene.view_size,
                               seed=cfg.data.multiview_scene.camera_seed)
        model = train_multiview_detector(train, cfg.multiview_model, cams, cfg.multiview_train)
        surface = MultiViewSurface(model)
        save_cameras(out_dir / "cameras.json", cams)
    else:
        model = train_toy_detector(train, cfg.model, cfg.train)
        surface = DetectorSurface(model)
    metric, _ = surface.evaluate(surface.images(held_out), held_out, capture=False)
    meta = {surface.metric_name: float(metric), "seed": cfg.train.seed, "train_count": len(train)}
    path = out_dir / "model.npz"
    (save_multiview if cfg.multiview else save_detector)(path, model, meta)
    write_json(out_dir / "metrics.json", {"metric_name": surface.metric_name, "clean": float(metric),
                                          "seconds": round(time.time() - start, 1)})
    log.info("trained %s: held-out %s %.3f", path, surface.metric_name, metric)
    return model, path


def load_model(path):
    header, _ = read_checkpoint(path)
    return load_multiview(path) if header["kind"] == "multiview" else load_detector(path)


def surface_for(model):
    return MultiViewSurface(model) if hasattr(model, "cameras") else DetectorSurface(model)


def build_plan(cfg: ExperimentConfig) -> PatchPlan:
    p, strategy = cfg.plan, cfg.attack.strategy
    if cfg.multiview:
        sc = cfg.data.multiview_scene
        cams = default_cameras(sc.num_views, sc.view_size, seed=sc.camera_seed)
        views = p.adversarial_views if p.adversarial_views is not None else list(range(sc.num_views))
        return make_multiview_plan(cams, views, p.patch_edge, p.target_edge, strategy,
                                   p.num_sources, p.num_targets)
    if p.source_locations is not None or p.target_locations is not None:
        return PatchPlan(source_locations=p.source_locations or [], target_locations=p.target_locations or [],
                         patch_edge=p.patch_edge, target_edge=p.target_edge, placement="explicit")
    return make_plan(strategy, cfg.model.image_size, p.num_sources, p.num_targets, p.patch_edge,
                     p.target_edge, p.placement, seed=cfg.seed)


def _model_for(cfg: ExperimentConfig, out_dir: Path):
    if cfg.checkpoint:
        return load_model(cfg.checkpoint)
    model, _ = train_model(cfg, out_dir)
    return model


# -- commands ----------------------------------------------------------------

def _attack(cfg: ExperimentConfig, out_dir: Path):
    model = _model_for(cfg, out_dir)
    plan = build_plan(cfg)
    train, held_out = attack_data(cfg)
    attack_cfg = AttackConfig(**{**cfg.attack.__dict__, "seed": cfg.seed})
    artifacts = run_attack(surface_for(model), train, held_out, plan, attack_cfg, out_dir=out_dir,
                           model_id=cfg.checkpoint or str(out_dir / "model.npz"))
    plot_history([out_dir], out_dir / "curves.png")
    return artifacts


def _frames_from(run_dir, surface, plan):
    with np.load(Path(run_dir) / "frames.npz") as f:
        frames = {k: torch.from_numpy(f[k]) for k in f.files}
    src_mask, tgt_mask = surface.masks(plan)
    return PerturbationState(frames.get("source"), frames.get("target"), src_mask, tgt_mask)


def _eval_inputs(cfg: ExperimentConfig, surface):
    _, held_out = attack_data(cfg)
    images = surface.images(held_out)
    if cfg.patches_from:
        run_cfg = load_config(Path(cfg.patches_from) / "config.yaml")
        plan = build_plan(run_cfg)
        state = _frames_from(cfg.patches_from, surface, plan)
        images = apply_perturbation(images, state, run_cfg.attack.strategy).detach()
    return held_out, images


def _eval(cfg: ExperimentConfig, out_dir: Path):
    if not cfg.checkpoint:
        raise ConfigError("eval needs a checkpoint")
    surface = surface_for(load_model(cfg.checkpoint))
    held_out, images = _eval_inputs(cfg, surface)
    metric, _ = surface.evaluate(images, held_out, capture=False)
    result = {"metric_name": surface.metric_name, "metric": float(metric),
              "patched": bool(cfg.patches_from), "frames": len(held_out)}
    write_json(out_dir / "metrics.json", result)
    return result


def _heatmap(cfg: ExperimentConfig, out_dir: Path):
    if not cfg.checkpoint:
        raise ConfigError("heatmap needs a checkpoint")
    model = load_model(cfg.checkpoint)
    surface = surface_for(model)
    held_out, images = _eval_inputs(cfg, surface)
    frame = model.config.plane_size if cfg.multiview else model.config.image_size
    written = []
    with torch.no_grad():
        for i in range(min(4, len(held_out))):
            out, traces = surface.forward(images[i:i + 1], capture=True)
            export_heatmaps(traces, frame, out_dir, prefix=f"frame{i}")
            written += [f"frame{i}_pointer.png", f"frame{i}_attention.png"]
            if cfg.multiview:
                world = decode_world_heatmap(out[0])
                write_gray_png(out_dir / f"frame{i}_world.png", world.probabilities)
                written.append(f"frame{i}_world.png")
    write_json(out_dir / "heatmaps.json", {"files": written})
    return written


def check_plan(cfg: ExperimentConfig):
    """Build and validate the patch plan without touching any model."""
    plan = build_plan(cfg)
    if cfg.multiview:
        frame, R = cfg.multiview_model.view_size, cfg.multiview_model.num_points
    else:
        frame, R = cfg.model.image_size, cfg.model.num_points
    plan.validate(cfg.attack.strategy, frame, R)
    return plan


def run_command(cfg: ExperimentConfig, out_dir=None, force: bool = False, parallel: int = 1) -> Path:
    """Validate ``cfg`` and execute it into ``out_dir``. Returns the run directory."""
    cfg.validate()
    if cfg.command == "attack":
        check_plan(cfg)
    elif cfg.command == "sweep":
        for v in cfg.sweep.values:
            check_plan(apply_axis(cfg, cfg.sweep.axis, v))
    out_dir = out_dir or cfg.out_dir
    if out_dir is None:
        raise ConfigError("no output directory given")
    out = prepare_run_dir(out_dir, force)
    (out / "config.yaml").write_text(dump_config(cfg))
    torch.manual_seed(cfg.seed)
    if cfg.command == "train":
        train_model(cfg, out)
    elif cfg.command == "attack":
        _attack(cfg, out)
    elif cfg.command == "eval":
        _eval(cfg, out)
    elif cfg.command == "heatmap":
        _heatmap(cfg, out)
    elif cfg.command == "sweep":
        run_sweep(cfg, out, parallel)
    return out


def _sweep_point(args):
    cfg, out = args
    torch.set_num_threads(1)
    run_command(cfg, out, force=True)
    return str(out)


def run_sweep(cfg: ExperimentConfig, out: Path, parallel: int = 1) -> List[Path]:
    axis, values = cfg.sweep.axis, list(cfg.sweep.values)
    points = [apply_axis(cfg, axis, v) for v in values]
    if axis != "num_layers" and not cfg.checkpoint:
        _, path = train_model(cfg, out)
        for p in points:
            p.checkpoint = str(path)
    for p in points:
        p.command = "attack"
        p.sweep = None
    dirs = [out / f"{axis}_{v}" for v in values]
    jobs = list(zip(points, dirs))
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as pool:
            list(pool.map(_sweep_point, jobs))
    else:
        for job in jobs:
            _sweep_point(job)
    emit_report(dirs, out)
    plot_sweep(dirs, values, axis, out / f"sweep_{axis}.png")
    return dirs


# -- reports -----------------------------------------------------------------

def _plan_summary(meta: dict) -> str:
    plan = meta.get("plan") or {}
    te = plan.get("target_edge") or plan.get("patch_edge")
    s = f"S={len(plan.get('source_locations', []))}x{plan.get('patch_edge')}px "
    s += f"T={len(plan.get('target_locations', []))}x{te}px {plan.get('placement', '')}"
    if plan.get("source_views") or plan.get("target_views"):
        s += f" views={sorted(set(plan.get('source_views', []) + plan.get('target_views', [])))}"
    return s.strip()


def _report_row(run_dir: Path) -> dict:
    import json
    row = {k: None for k in REPORT_FIELDS}
    row["run"] = str(run_dir)
    try:
        metrics = json.loads((run_dir / "metrics.json").read_text())
        meta = json.loads((run_dir / "patches" / "metadata.json").read_text())
        if not (run_dir / "history.csv").exists():
            raise FileNotFoundError("history.csv")
    except (OSError, ValueError):
        row["status"] = "incomplete"
        return row
    row.update(strategy=metrics.get("strategy"), plan=_plan_summary(meta),
               metric_name=metrics.get("metric_name"),
               initial_metric=metrics["initial"]["metric"], final_metric=metrics["final"]["metric"],
               iterations=metrics["final"].get("iterations"), stopped_early=metrics.get("stopped_early"),
               status="complete")
    return row


def emit_report(run_dirs: Sequence, out_dir=None) -> List[dict]:
    """One row per run; writes ``report.csv``, ``report.md`` and ``curves.png`` when ``out_dir``."""
    run_dirs = [Path(d) for d in run_dirs]
    if not run_dirs:
        raise ConfigError("report needs at least one run directory")
    rows = [_report_row(d) for d in run_dirs]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "report.csv", rows, REPORT_FIELDS)
        lines = ["| " + " | ".join(REPORT_FIELDS) + " |", "|" + "---|" * len(REPORT_FIELDS)]
        for r in rows:
            cells = [("" if r[k] is None else (f"{r[k]:.4f}" if isinstance(r[k], float) else str(r[k])))
                     for k in REPORT_FIELDS]
            lines.append("| " + " | ".join(cells) + " |")
        (out / "report.md").write_text("\n".join(lines) + "\n")
        done = [d for d, r in zip(run_dirs, rows) if r["status"] == "complete"]
        if done:
            plot_history(done, out / "curves.png")
    return rows


def _label(run_dir: Path) -> str:
    import json
    try:
        strategy = json.loads((run_dir / "metrics.json").read_text()).get("strategy")
    except (OSError, ValueError):
        strategy = None
    return f"{strategy} ({run_dir.name})" if strategy else run_dir.name


def plot_history(run_dirs: Sequence[Path], path):
    """Overlaid eval-metric and combined-loss curves, one line per run."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    for d in run_dirs:
        rows = read_csv(Path(d) / "history.csv")
        it = [int(r["iteration"]) for r in rows]
        metric = [float(r["metric"]) for r in rows]
        axes[0].plot(it, metric, label=_label(Path(d)))
        pairs = [(int(r["iteration"]), float(r["combined"])) for r in rows if r["combined"] not in ("", None)]
        if pairs:
            axes[1].plot(*zip(*pairs), label=_label(Path(d)))
    axes[0].set(xlabel="iteration", ylabel="eval metric", title="robust metric")
    axes[1].set(xlabel="iteration", ylabel="combined loss", title="attack loss")
    axes[0].legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_sweep(run_dirs: Sequence[Path], values, axis: str, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = [_report_row(Path(d)) for d in run_dirs]
    xs = [str(v) for v in values]
    fig, ax = plt.subplots(figsize=(5, 4))
    nan = float("nan")
    ax.plot(xs, [nan if r["initial_metric"] is None else r["initial_metric"] for r in rows], "o--", label="clean")
    ax.plot(xs, [nan if r["final_metric"] is None else r["final_metric"] for r in rows], "o-", label="attacked")
    ax.set(xlabel=axis, ylabel=rows[0]["metric_name"] or "metric", title=f"impact of {axis}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=100)
    plt.close(fig)
