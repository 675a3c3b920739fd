"""Detection metrics, attack-progress metrics and heatmap export.

Rectangles are normalized ``(x0, y0, x1, y1)``; a point is inside when
``x0 <= x < x1`` and ``y0 <= y < y1``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment


def _np(x):
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def _iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between cxcywh boxes ``(N, 4)`` and ``(M, 4)``."""
    def xyxy(v):
        return np.stack([v[:, 0] - v[:, 2] / 2, v[:, 1] - v[:, 3] / 2,
                         v[:, 0] + v[:, 2] / 2, v[:, 1] + v[:, 3] / 2], 1)
    a, b = xyxy(a.reshape(-1, 4)), xyxy(b.reshape(-1, 4))
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def precision_recall_ap(tp: np.ndarray, n_gt: int) -> float:
    """All-point interpolated AP from score-ordered true-positive flags."""
    if n_gt == 0:
        return 1.0 if len(tp) == 0 else 0.0
    if len(tp) == 0:
        return 0.0
    tp = np.asarray(tp, dtype=float)
    ctp = np.cumsum(tp)
    precision = ctp / np.arange(1, len(tp) + 1)
    recall = ctp / n_gt
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev) * envelope))


def _class_ap(dets, gts, iou_threshold):
    """dets: list of (image, box, score); gts: per-image box arrays."""
    n_gt = sum(len(g) for g in gts)
    order = sorted(range(len(dets)), key=lambda i: -dets[i][2])
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        img, box, _ = dets[i]
        g = gts[img]
        if len(g) == 0:
            continue
        ious = _iou_matrix(np.asarray(box)[None], g)[0]
        ious[used[img]] = -1
        j = int(np.argmax(ious))
        if ious[j] >= iou_threshold:
            used[img][j] = True
            tp[rank] = 1
    return precision_recall_ap(tp, n_gt)


def average_precision(detections: Sequence[dict], ground_truth: Sequence[dict],
                      iou_threshold: float = 0.5) -> float:
    """Class-aware AP at one IoU threshold, averaged over classes that have ground truth.

    ``detections[i]``: ``{"boxes" (n, 4) cxcywh, "scores" (n,), "labels" (n,)}``;
    ``ground_truth[i]``: ``{"boxes", "labels"}``. Detections are matched greedily in
    descending score order. No ground truth and no detections gives 1.0.
    """
    if len(detections) != len(ground_truth):
        raise ValueError("detections and ground_truth must cover the same images")
    gt_labels = [_np(g["labels"]).reshape(-1).astype(int) for g in ground_truth]
    det_labels = [_np(d["labels"]).reshape(-1).astype(int) for d in detections]
    classes = sorted(set(np.concatenate(gt_labels + [np.zeros(0, int)]).tolist()))
    if not classes:
        return 1.0 if sum(len(l) for l in det_labels) == 0 else 0.0
    aps = []
    for c in classes:
        gts = [_np(g["boxes"]).reshape(-1, 4)[gl == c] for g, gl in zip(ground_truth, gt_labels)]
        dets = []
        for img, (d, dl) in enumerate(zip(detections, det_labels)):
            boxes = _np(d["boxes"]).reshape(-1, 4)
            scores = _np(d["scores"]).reshape(-1)
            for k in np.flatnonzero(dl == c):
                dets.append((img, boxes[k], float(scores[k])))
        aps.append(_class_ap(dets, gts, iou_threshold))
    return float(np.mean(aps))


def decode_detections(output, score_threshold: float = 0.0) -> List[dict]:
    """Turn a ``DetectionOutput`` into per-image ``{"boxes", "scores", "labels"}``.

    Score is the highest foreground class probability of each query.
    """
    prob = output.logits.detach().softmax(-1)[..., :-1]
    scores, labels = prob.max(-1)
    boxes = output.boxes.detach()
    result = []
    for i in range(prob.shape[0]):
        keep = scores[i] >= score_threshold
        result.append({"boxes": boxes[i][keep].cpu().numpy(), "scores": scores[i][keep].cpu().numpy(),
                       "labels": labels[i][keep].cpu().numpy()})
    return result


@dataclass
class ModaResult:
    tp: int
    fp: int
    fn: int
    gt: int

    @property
    def undefined(self) -> bool:
        """Zero ground truth with detections present: the formula has no value."""
        return self.gt == 0 and self.fp > 0

    @property
    def moda(self) -> float:
        if self.gt == 0:
            return 1.0 if self.fp == 0 else math.nan
        return 1.0 - (self.fp + self.fn) / self.gt

    def __add__(self, other: "ModaResult") -> "ModaResult":
        return ModaResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.gt + other.gt)


def match_points(detections, ground_truth, distance_threshold: float):
    """Maximum one-to-one matching of points within ``distance_threshold``.

    Among maximum matchings the total matched distance is minimized.
    Returns ``(det_idx, gt_idx)`` arrays.
    """
    det = _np(detections).reshape(-1, 2)
    gt = _np(ground_truth).reshape(-1, 2)
    if len(det) == 0 or len(gt) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    dist = np.linalg.norm(det[:, None] - gt[None], axis=-1)
    valid = dist <= distance_threshold
    # any invalid pair costs more than a full set of valid ones
    big = min(len(det), len(gt)) + 1.0
    cost = np.where(valid, dist / max(distance_threshold, 1e-12), big)
    rows, cols = linear_sum_assignment(cost)
    keep = valid[rows, cols]
    return rows[keep], cols[keep]


def moda(plane_detections, plane_ground_truth, distance_threshold: float) -> ModaResult:
    """Counts for ``1 - (FP + FN) / GT`` on one frame; read ``.moda`` for the value."""
    det = _np(plane_detections).reshape(-1, 2)
    gt = _np(plane_ground_truth).reshape(-1, 2)
    rows, _ = match_points(det, gt, distance_threshold)
    tp = len(rows)
    return ModaResult(tp=tp, fp=len(det) - tp, fn=len(gt) - tp, gt=len(gt))


def dataset_moda(per_frame_detections, per_frame_truth, distance_threshold: float) -> ModaResult:
    total = ModaResult(0, 0, 0, 0)
    for d, g in zip(per_frame_detections, per_frame_truth):
        total = total + moda(d, g, distance_threshold)
    return total


def _inside(points: torch.Tensor, rects) -> torch.Tensor:
    inside = torch.zeros(points.shape[:-1], dtype=torch.bool, device=points.device)
    x, y = points[..., 0], points[..., 1]
    for x0, y0, x1, y1 in rects:
        inside |= (x >= x0) & (x < x1) & (y >= y0) & (y < y1)
    return inside


def pointer_redirect_fraction(traces, target_rects) -> float:
    """Fraction of all sampling locations that land inside any target rectangle."""
    hits = total = 0
    for t in traces:
        inside = _inside(t.sampling_locations.detach(), target_rects)
        hits += int(inside.sum())
        total += inside.numel()
    return hits / total if total else 0.0


def attention_mass_to_target(traces, target_rects) -> float:
    """Post-softmax weight on sampling points inside targets over total weight."""
    inside_mass = total = 0.0
    for t in traces:
        w = t.attention_weights.detach()
        inside = _inside(t.sampling_locations.detach(), target_rects)
        inside_mass += float((w * inside).sum())
        total += float(w.sum())
    return inside_mass / total if total else 0.0


def mean_pointer_target_distance(traces, target_points) -> float:
    """Mean distance (normalized units) from each sampling location to its nearest target."""
    targets = torch.as_tensor(np.asarray(target_points, dtype=np.float32)).reshape(-1, 2)
    total, count = 0.0, 0
    for t in traces:
        loc = t.sampling_locations.detach().reshape(-1, 2).float()
        d = torch.cdist(loc, targets.to(loc.device)).min(-1)[0]
        total += float(d.sum())
        count += d.numel()
    return total / count if count else 0.0


def pointer_histograms(traces, frame_size):
    """Raw ``(pointer_counts, attention_mass)`` grids of shape ``frame_size``.

    Locations outside the frame are dropped.
    """
    h, w = frame_size
    counts = np.zeros(h * w)
    mass = np.zeros(h * w)
    for t in traces:
        loc = t.sampling_locations.detach().reshape(-1, 2).cpu().numpy()
        wt = t.attention_weights.detach().reshape(-1).cpu().numpy()
        col = np.floor(loc[:, 0] * w).astype(int)
        row = np.floor(loc[:, 1] * h).astype(int)
        ok = (col >= 0) & (col < w) & (row >= 0) & (row < h)
        idx = row[ok] * w + col[ok]
        counts += np.bincount(idx, minlength=h * w)
        mass += np.bincount(idx, weights=wt[ok], minlength=h * w)
    return counts.reshape(h, w), mass.reshape(h, w)


def _normalize(a):
    peak = a.max()
    return a / peak if peak > 0 else a


def export_heatmaps(traces, frame_size, out_dir=None, prefix: str = "heatmap"):
    """Pointer and attention heatmaps normalized to [0, 1]; written as PNGs if ``out_dir``."""
    counts, mass = pointer_histograms(traces, frame_size)
    pointer, attention = _normalize(counts), _normalize(mass)
    if out_dir is not None:
        from .io import write_gray_png
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_gray_png(out / f"{prefix}_pointer.png", pointer)
        write_gray_png(out / f"{prefix}_attention.png", attention)
    return pointer, attention


@dataclass
class EvalReport:
    ap: Optional[float] = None
    moda: Optional[float] = None
    pointer_redirect_fraction: float = 0.0
    attention_mass_to_target: float = 0.0
    series: Dict[str, List[float]] = field(default_factory=dict)

    def __post_init__(self):
        for name in ("pointer_redirect_fraction", "attention_mass_to_target"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")
        if self.ap is not None and not 0.0 <= self.ap <= 1.0:
            raise ValueError(f"ap={self.ap} outside [0, 1]")
        if self.moda is not None and self.moda > 1.0:
            raise ValueError(f"moda={self.moda} above 1")
