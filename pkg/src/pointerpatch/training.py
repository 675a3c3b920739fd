"""Training and evaluation of the toy detector, plus checkpoint helpers."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import torch

from .criterion import make_targets, model_loss
from .detector import DeformableDetector, ModelConfig, build_model
from .evaluation import average_precision, decode_detections
from .io import load_state, read_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 0.5
    hflip: bool = True
    seed: int = 0
    log_every: int = 10


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i:i + batch_size]


def _hflip(images, targets):
    images = images.flip(-1)
    flipped = []
    for t in targets:
        boxes = t["boxes"].clone()
        boxes[:, 0] = 1 - boxes[:, 0]
        flipped.append({"boxes": boxes, "labels": t["labels"]})
    return images, flipped


def train_toy_detector(dataset: Sequence, config: ModelConfig, train: TrainConfig = TrainConfig(),
                       eval_set: Optional[Sequence] = None, callback=None) -> DeformableDetector:
    """Fit a fresh detector on ``dataset`` (list of ``Sample``). Seeded and repeatable.

    Raises ``TrainingDiverged`` if the loss becomes non-finite.
    """
    torch.manual_seed(train.seed)
    model = build_model(config, seed=train.seed)
    model.train()
    rng = np.random.default_rng(train.seed)
    images = torch.from_numpy(np.stack([s.image for s in dataset]))
    targets = make_targets(dataset)
    opt = torch.optim.AdamW(model.parameters(), lr=train.lr, weight_decay=train.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / train.batch_size)
    total = train.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=train.lr, total_steps=total,
                                                pct_start=0.1, anneal_strategy="cos")
    start = time.time()
    for epoch in range(train.epochs):
        running = 0.0
        for idx in _batches(len(dataset), train.batch_size, rng):
            x = images[idx]
            t = [targets[i] for i in idx]
            if train.hflip and rng.random() < 0.5:
                x, t = _hflip(x, t)
            out, _ = model(x, capture=False)
            loss = model_loss(out, t)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss {loss.item()} at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), train.grad_clip)
            opt.step()
            sched.step()
            running += loss.item() * len(idx)
        running /= len(dataset)
        if callback is not None:
            callback(epoch, running, model)
        if train.log_every and (epoch + 1) % train.log_every == 0:
            msg = f"epoch {epoch + 1}/{train.epochs} loss {running:.4f} ({time.time() - start:.0f}s)"
            if eval_set is not None:
                msg += f" eval AP {evaluate_ap(model, eval_set):.3f}"
            log.info(msg)
    model.eval()
    return model


@torch.no_grad()
def predict(model, images: torch.Tensor, batch_size: int = 40):
    was = model.training
    model.eval()
    dets = []
    for i in range(0, len(images), batch_size):
        out, _ = model(images[i:i + batch_size], capture=False)
        dets.extend(decode_detections(out))
    model.train(was)
    return dets


def evaluate_ap(model, samples, images: Optional[torch.Tensor] = None, iou_threshold: float = 0.5) -> float:
    """AP of ``model`` on ``samples`` (optionally on substituted ``images``)."""
    if images is None:
        images = torch.from_numpy(np.stack([s.image for s in samples]))
    dets = predict(model, images)
    truth = [{"boxes": s.boxes, "labels": s.labels} for s in samples]
    return average_precision(dets, truth, iou_threshold)


def save_detector(path, model: DeformableDetector, meta=None):
    save_checkpoint(path, model, model.config, kind="detector", meta=meta)


def load_detector(path) -> DeformableDetector:
    header, arrays = read_checkpoint(path)
    if header["kind"] != "detector":
        raise ValueError(f"{path} holds a {header['kind']!r}, not a detector")
    model = DeformableDetector(ModelConfig(**header["config"]))
    load_state(model, arrays)
    model.eval()
    return model
