"""Pointer, attention and dense-baseline attack losses.

Every trace-based loss sums over layers and heads, averages over the
``Q x D x R`` sampling slots of each head, and averages over the batch.
"""

from __future__ import annotations

from typing import Sequence

import torch

from ..attention import AttentionTrace, DenseAttentionTrace


def _as_targets(targets, like: torch.Tensor) -> torch.Tensor:
    t = torch.as_tensor(targets, dtype=like.dtype, device=like.device).reshape(-1, 2)
    return t


def loss_inward(traces: Sequence[AttentionTrace], targets) -> torch.Tensor:
    """Squared distance from each sampling location to its paired target.

    ``targets`` is the extended ``(R, 2)`` list: slot ``k`` of every
    (layer, head, query, level) is paired with ``targets[k]``.
    """
    total = 0.0
    for t in traces:
        loc = t.sampling_locations                                  # B, H, Q, D, R, 2
        tg = _as_targets(targets, loc)
        if tg.shape[0] != loc.shape[-2]:
            raise ValueError(f"need {loc.shape[-2]} extended targets, got {tg.shape[0]}")
        sq = (loc - tg).pow(2).sum(-1)                              # B, H, Q, D, R
        total = total + sq.mean((2, 3, 4)).sum(1).mean(0)
    return torch.as_tensor(total) if not torch.is_tensor(total) else total


def loss_outward(traces: Sequence[AttentionTrace], targets) -> torch.Tensor:
    return -loss_inward(traces, targets)


def loss_attention(traces: Sequence[AttentionTrace]) -> torch.Tensor:
    """Negative mean pre-softmax score per head, summed over layers and heads."""
    total = 0.0
    for t in traces:
        total = total - t.scores.mean((2, 3, 4)).sum(1).mean(0)
    return torch.as_tensor(total) if not torch.is_tensor(total) else total


def _inside(points, rects):
    inside = torch.zeros(points.shape[:-1], dtype=torch.bool, device=points.device)
    for x0, y0, x1, y1 in rects:
        inside |= ((points[..., 0] >= x0) & (points[..., 0] < x1)
                   & (points[..., 1] >= y0) & (points[..., 1] < y1))
    return inside


def loss_att_baseline(traces, target_rects) -> torch.Tensor:
    """Attention captured by the target region, negated.

    Sparse traces: minus the mean over layers and heads of the per-query
    post-softmax mass whose sampling location falls inside a rectangle.
    Dense traces: ``-sum_l mean_h (1/Q) sum_q sum_{keys inside} A``.
    Rectangles are normalized ``(x0, y0, x1, y1)``.
    """
    sparse, dense = [], []
    for t in traces:
        if isinstance(t, DenseAttentionTrace):
            if t.key_coords is None:
                raise ValueError("dense trace needs key coordinates")
            inside = _inside(t.key_coords, target_rects).to(t.weights.dtype)   # K
            mass = (t.weights * inside).sum(-1)                               # B, H, Q
            dense.append(mass.mean(2).mean(1).mean(0))
        else:
            w = t.attention_weights
            inside = _inside(t.sampling_locations.detach(), target_rects).to(w.dtype)
            mass = (w * inside).sum((3, 4))                                   # B, H, Q
            sparse.append(mass.mean(2).mean(1).mean(0))
    parts = []
    if sparse:
        parts.append(-torch.stack(sparse).mean())
    if dense:
        parts.append(-torch.stack(dense).sum())
    return sum(parts) if parts else torch.zeros(())
