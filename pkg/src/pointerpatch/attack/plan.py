"""Patch placement: plans, binary masks and target extension.

A patch location is the normalized ``(row, col)`` of its top-left pixel. In pixel
units a patch at ``(p, q)`` with edge ``a`` covers rows ``p <= i < p + a`` and
columns ``q <= j < q + a``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

STRATEGIES = ("IP", "OP", "SP", "CP", "ATT")
PLACEMENTS = ("uniform", "random", "explicit")


class PlanError(ValueError):
    pass


def build_mask(locations: Sequence[Tuple[int, int]], patch_edge: int, frame: Tuple[int, int]) -> np.ndarray:
    """Union of ``patch_edge`` squares at pixel ``(row, col)`` corners, clipped to ``frame``."""
    if patch_edge < 1:
        raise PlanError("patch_edge must be >= 1")
    h, w = frame
    mask = np.zeros((h, w), dtype=bool)
    for p, q in locations:
        p, q = int(p), int(q)
        if p >= h or q >= w or p + patch_edge <= 0 or q + patch_edge <= 0:
            raise PlanError(f"patch at ({p}, {q}) lies entirely outside frame {frame}")
        mask[max(p, 0):min(p + patch_edge, h), max(q, 0):min(q + patch_edge, w)] = True
    return mask


def extend_targets(targets: Sequence, num_points: int) -> list:
    """Repeat targets round-robin to exactly ``num_points`` entries, each at least once."""
    n = len(targets)
    if n == 0:
        raise PlanError("need at least one target")
    if n > num_points:
        raise PlanError(f"{n} targets exceed the {num_points} pointers per head")
    return [targets[k % n] for k in range(num_points)]


def to_pixels(location, frame) -> Tuple[int, int]:
    r, c = location
    return int(round(r * frame[0])), int(round(c * frame[1]))


@dataclass
class PatchPlan:
    """Where source and target patches go.

    ``source_views`` / ``target_views`` give the view of each location in
    multi-view mode and are empty for single-view plans.
    """

    source_locations: List[Tuple[float, float]] = field(default_factory=list)
    target_locations: List[Tuple[float, float]] = field(default_factory=list)
    patch_edge: int = 6
    target_edge: Optional[int] = None
    source_views: List[int] = field(default_factory=list)
    target_views: List[int] = field(default_factory=list)
    placement: str = "explicit"

    def __post_init__(self):
        self.source_locations = [tuple(float(v) for v in loc) for loc in self.source_locations]
        self.target_locations = [tuple(float(v) for v in loc) for loc in self.target_locations]
        self.source_views = [int(v) for v in self.source_views]
        self.target_views = [int(v) for v in self.target_views]
        if self.placement not in PLACEMENTS:
            raise PlanError(f"unknown placement {self.placement!r}")
        if self.patch_edge < 1 or (self.target_edge is not None and self.target_edge < 1):
            raise PlanError("patch edges must be >= 1")
        if self.source_views and len(self.source_views) != len(self.source_locations):
            raise PlanError("source_views must parallel source_locations")
        if self.target_views and len(self.target_views) != len(self.target_locations):
            raise PlanError("target_views must parallel target_locations")

    @property
    def target_patch_edge(self) -> int:
        return self.target_edge if self.target_edge is not None else self.patch_edge

    @property
    def multiview(self) -> bool:
        return bool(self.source_views or self.target_views)

    def per_view(self) -> Dict[int, Dict[str, list]]:
        out: Dict[int, Dict[str, list]] = {}
        for loc, v in zip(self.source_locations, self.source_views):
            out.setdefault(v, {"source": [], "target": []})["source"].append(loc)
        for loc, v in zip(self.target_locations, self.target_views):
            out.setdefault(v, {"source": [], "target": []})["target"].append(loc)
        return out

    def rects(self, frame, role: str) -> List[Tuple[int, int, int, int]]:
        """Pixel rectangles ``(r0, c0, r1, c1)`` (half-open) for ``role`` source/target."""
        locs = self.source_locations if role == "source" else self.target_locations
        edge = self.patch_edge if role == "source" else self.target_patch_edge
        out = []
        for loc in locs:
            p, q = to_pixels(loc, frame)
            out.append((p, q, p + edge, q + edge))
        return out

    def target_points(self, frame) -> np.ndarray:
        """Target patch centers as normalized ``(x, y)``."""
        h, w = frame
        e = self.target_patch_edge
        pts = [((q + e / 2) / w, (p + e / 2) / h) for p, q in
               (to_pixels(loc, frame) for loc in self.target_locations)]
        return np.asarray(pts, dtype=np.float32).reshape(-1, 2)

    def target_rects_normalized(self, frame):
        h, w = frame
        return [(c0 / w, r0 / h, c1 / w, r1 / h) for r0, c0, r1, c1 in self.rects(frame, "target")]

    def area(self, frame, strategy: str) -> int:
        """Number of perturbed pixels (per view) under ``strategy``."""
        total = 0
        if uses_source(strategy):
            total += len(self.source_locations) * self.patch_edge ** 2
        if uses_target(strategy):
            total += len(self.target_locations) * self.target_patch_edge ** 2
        return total

    def validate(self, strategy: str, frame, num_points: Optional[int] = None):
        """Check the plan against ``strategy``; raises ``PlanError``."""
        if strategy not in STRATEGIES:
            raise PlanError(f"unknown strategy {strategy!r}")
        if not self.target_locations:
            raise PlanError("plan needs at least one target location")
        if strategy in ("IP", "OP", "CP") and not self.source_locations:
            raise PlanError(f"{strategy} needs source locations")
        if num_points is not None and strategy != "ATT":
            if self.target_views:
                most = max(self.target_views.count(v) for v in set(self.target_views))
            else:
                most = len(self.target_locations)
            if most > num_points:
                raise PlanError(f"{most} targets (per view) exceed R={num_points}")
        h, w = frame
        rects = []
        for role in ("source", "target"):
            views = self.source_views if role == "source" else self.target_views
            for k, r in enumerate(self.rects(frame, role)):
                if r[0] < 0 or r[1] < 0 or r[2] > h or r[3] > w:
                    raise PlanError(f"{role} patch {k} at {r[:2]} leaves the {h}x{w} frame")
                rects.append((views[k] if views else 0, role, k, r))
        for i in range(len(rects)):
            for j in range(i + 1, len(rects)):
                vi, ri, ki, a = rects[i]
                vj, rj, kj, b = rects[j]
                if vi == vj and a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]:
                    raise PlanError(f"{ri} patch {ki} overlaps {rj} patch {kj}")


def uses_source(strategy: str) -> bool:
    return strategy in ("IP", "OP", "CP")


def uses_target(strategy: str) -> bool:
    return strategy in ("SP", "CP", "ATT")


def _disjoint(r, others, gap=0):
    return all(not (r[0] < o[2] + gap and o[0] < r[2] + gap and r[1] < o[3] + gap and o[1] < r[3] + gap)
               for o in others)


def uniform_corners(count: int, edge: int, frame, shift: float = 0.0) -> List[Tuple[int, int]]:
    """Corners of ``count`` patches spread on a near-square grid over the frame.

    ``shift`` (fraction of a cell) moves the whole lattice, so source and target
    lattices can interleave without overlapping.
    """
    h, w = frame
    if count <= 0:
        return []
    cols = int(np.ceil(np.sqrt(count)))
    rows = int(np.ceil(count / cols))
    out = []
    for k in range(count):
        i, j = divmod(k, cols)
        cy = (i + 0.5 + shift) * h / rows
        cx = (j + 0.5 + shift) * w / cols
        p = int(np.clip(round(cy - edge / 2), 0, h - edge))
        q = int(np.clip(round(cx - edge / 2), 0, w - edge))
        out.append((p, q))
    return out


def random_corners(count: int, edge: int, frame, rng, taken=(), max_tries: int = 1000):
    h, w = frame
    placed = list(taken)
    out = []
    for _ in range(count):
        for _ in range(max_tries):
            p = int(rng.integers(0, h - edge + 1))
            q = int(rng.integers(0, w - edge + 1))
            r = (p, q, p + edge, q + edge)
            if _disjoint(r, placed):
                break
        else:
            raise PlanError(f"could not place {count} disjoint {edge}px patches in {frame}")
        placed.append(r)
        out.append((p, q))
    return out


def make_plan(strategy: str, frame, num_sources: int = 1, num_targets: int = 1,
              patch_edge: int = 6, target_edge: Optional[int] = None,
              placement: str = "uniform", seed: int = 0) -> PatchPlan:
    """Build a single-view plan; SP and ATT get no source patches."""
    h, w = frame
    te = target_edge or patch_edge
    n_src = num_sources if uses_source(strategy) else 0
    if placement == "random":
        rng = np.random.default_rng(seed)
        tgt = random_corners(num_targets, te, frame, rng)
        taken = [(p, q, p + te, q + te) for p, q in tgt]
        src = random_corners(n_src, patch_edge, frame, rng, taken)
    else:
        tgt = uniform_corners(num_targets, te, frame)
        taken = [(p, q, p + te, q + te) for p, q in tgt]
        src = []
        for shift in (0.5, 0.25, -0.25, 0.0):
            cand = uniform_corners(n_src, patch_edge, frame, shift=shift)
            rects = [(p, q, p + patch_edge, q + patch_edge) for p, q in cand]
            if all(_disjoint(r, taken) for r in rects):
                src = cand
                break
        else:
            if n_src:
                src = random_corners(n_src, patch_edge, frame, np.random.default_rng(seed), taken)
    plan = PatchPlan(source_locations=[(p / h, q / w) for p, q in src],
                     target_locations=[(p / h, q / w) for p, q in tgt],
                     patch_edge=patch_edge, target_edge=target_edge, placement=placement)
    return plan
