"""Set-prediction loss: bipartite matching, then cross-entropy + L1 + generalized IoU."""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from scipy.optimize import linear_sum_assignment

from .detector import DetectionOutput


def box_cxcywh_to_xyxy(b: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = b.unbind(-1)
    return torch.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], -1)


def box_xyxy_to_cxcywh(b: torch.Tensor) -> torch.Tensor:
    x0, y0, x1, y1 = b.unbind(-1)
    return torch.stack([(x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0], -1)


def box_iou(a: torch.Tensor, b: torch.Tensor):
    """Pairwise IoU and union of xyxy boxes ``(N, 4)``, ``(M, 4)``."""
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    lt = torch.max(a[:, None, :2], b[None, :, :2])
    rb = torch.min(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union.clamp(min=1e-12), union


def generalized_box_iou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    iou, union = box_iou(a, b)
    lt = torch.min(a[:, None, :2], b[None, :, :2])
    rb = torch.max(a[:, None, 2:], b[None, :, 2:])
    wh = (rb - lt).clamp(min=0)
    hull = wh[..., 0] * wh[..., 1]
    return iou - (hull - union) / hull.clamp(min=1e-12)


@dataclass
class LossWeights:
    cls: float = 1.0
    l1: float = 5.0
    giou: float = 2.0
    no_object: float = 0.1   # relative weight of the no-object class in the CE term


def matching_cost(logits, boxes, labels, gt_boxes, weights: LossWeights = LossWeights()):
    """``(Q, N)`` cost of assigning each prediction to each ground-truth object."""
    prob = logits.softmax(-1)
    cost_cls = -prob[:, labels]
    cost_l1 = torch.cdist(boxes, gt_boxes, p=1)
    cost_giou = -generalized_box_iou(box_cxcywh_to_xyxy(boxes), box_cxcywh_to_xyxy(gt_boxes))
    return weights.cls * cost_cls + weights.l1 * cost_l1 + weights.giou * cost_giou


def hungarian_match(cost: torch.Tensor):
    """Optimal one-to-one assignment -> ``(query_idx, gt_idx)`` int arrays sorted by gt."""
    if cost.shape[1] == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    rows, cols = linear_sum_assignment(cost.detach().cpu().numpy())
    order = np.argsort(cols)
    return rows[order].astype(np.int64), cols[order].astype(np.int64)


def model_loss(detections: DetectionOutput, targets: Sequence[dict],
               weights: LossWeights = LossWeights(), include_aux: bool = True) -> torch.Tensor:
    """Set-prediction loss summed over the final and (optionally) auxiliary outputs.

    ``targets[i]`` has ``"boxes"`` ``(n, 4)`` normalized cxcywh and ``"labels"`` ``(n,)``.
    With no ground-truth objects only the no-object classification term remains.
    """
    total = _single_loss(detections, targets, weights)
    if include_aux:
        for aux in detections.aux:
            total = total + _single_loss(aux, targets, weights)
    return total


def _single_loss(det: DetectionOutput, targets, weights: LossWeights) -> torch.Tensor:
    logits, boxes = det.logits, det.boxes
    b, q, k1 = logits.shape
    no_obj = k1 - 1
    target_classes = torch.full((b, q), no_obj, dtype=torch.long, device=logits.device)
    src_boxes, tgt_boxes = [], []
    for i, t in enumerate(targets):
        gt_boxes = torch.as_tensor(t["boxes"], dtype=boxes.dtype, device=boxes.device).reshape(-1, 4)
        labels = torch.as_tensor(t["labels"], dtype=torch.long, device=logits.device).reshape(-1)
        if len(labels) == 0:
            continue
        with torch.no_grad():
            cost = matching_cost(logits[i], boxes[i], labels, gt_boxes, weights)
        qi, gi = hungarian_match(cost)
        qi = torch.as_tensor(qi, device=logits.device)
        gi = torch.as_tensor(gi, device=logits.device)
        target_classes[i, qi] = labels[gi]
        src_boxes.append(boxes[i, qi])
        tgt_boxes.append(gt_boxes[gi])
    class_weight = torch.ones(k1, dtype=logits.dtype, device=logits.device)
    class_weight[no_obj] = weights.no_object
    loss = weights.cls * F.cross_entropy(logits.reshape(-1, k1), target_classes.reshape(-1),
                                         weight=class_weight)
    if src_boxes:
        sb = torch.cat(src_boxes)
        tb = torch.cat(tgt_boxes)
        n = max(len(tb), 1)
        l1 = (sb - tb).abs().sum() / n
        giou = (1 - torch.diag(generalized_box_iou(box_cxcywh_to_xyxy(sb), box_cxcywh_to_xyxy(tb)))).sum() / n
        loss = loss + weights.l1 * l1 + weights.giou * giou
    return loss


def make_targets(samples, device=None) -> List[dict]:
    return [{"boxes": torch.as_tensor(s.boxes, dtype=torch.float32, device=device).reshape(-1, 4),
             "labels": torch.as_tensor(s.labels, dtype=torch.long, device=device).reshape(-1)}
            for s in samples]
