"""Exhaustive reference implementations used by the metric and mask tests."""

import itertools
import math

import numpy as np


def brute_mask(locations, a, frame):
    h, w = frame
    out = np.zeros((h, w), dtype=bool)
    for i in range(h):
        for j in range(w):
            out[i, j] = any(p <= i < p + a and q <= j < q + a for p, q in locations)
    return out


def box(cx, cy, w=0.2, h=0.2):
    return [cx, cy, w, h]


def iou(a, b):
    ax0, ay0, ax1, ay1 = a[0] - a[2] / 2, a[1] - a[3] / 2, a[0] + a[2] / 2, a[1] + a[3] / 2
    bx0, by0, bx1, by1 = b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def oracle_ap(dets, gts, thr=0.5):
    """Single image, single class. dets: [(box, score)] with distinct scores.

    Walks every score cut, recomputes greedy matches from scratch, then takes the
    area under the upper envelope of precision over recall.
    """
    if not gts:
        return 1.0 if not dets else 0.0
    ranked = sorted(dets, key=lambda d: -d[1])
    points = []
    for k in range(1, len(ranked) + 1):
        used, tp = set(), 0
        for b, _ in ranked[:k]:
            cands = [(iou(b, g), j) for j, g in enumerate(gts) if j not in used]
            if cands:
                best, j = max(cands, key=lambda c: (c[0], -c[1]))
                if best >= thr:
                    used.add(j)
                    tp += 1
        points.append((tp / len(gts), tp / k))
    ap, prev_r = 0.0, 0.0
    for r, _ in points:
        if r > prev_r:
            ap += (r - prev_r) * max(p for rr, p in points if rr >= r)
            prev_r = r
    return ap


def oracle_tp(det, gt, thr):
    """Largest number of disjoint (det, gt) pairs within ``thr``, by enumeration."""
    best = 0
    for k in range(min(len(det), len(gt)), 0, -1):
        for ds in itertools.permutations(range(len(det)), k):
            for gs in itertools.combinations(range(len(gt)), k):
                if all(math.dist(det[a], gt[b]) <= thr for a, b in zip(ds, gs)):
                    return k
    return best
