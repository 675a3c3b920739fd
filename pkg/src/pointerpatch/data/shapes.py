"""Seeded single-view shape scenes (circle / square / triangle on a noisy background)."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

SHAPES = ("circle", "square", "triangle")


class InfeasibleSceneError(ValueError):
    pass


@dataclass
class SceneSpec:
    image_size: Tuple[int, int] = (64, 64)
    object_count: Tuple[int, int] = (1, 3)         # inclusive range
    shapes: Tuple[str, ...] = SHAPES                # class id = position in this tuple
    size_range: Tuple[int, int] = (14, 24)          # object edge in pixels, inclusive
    background: Tuple[float, float] = (0.0, 0.35)   # base intensity range per channel
    noise_std: float = 0.04
    min_contrast: float = 0.35                      # min mean |object - background| color gap
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        self.object_count = tuple(int(v) for v in self.object_count)
        self.size_range = tuple(int(v) for v in self.size_range)
        self.shapes = tuple(self.shapes)
        self.background = tuple(float(v) for v in self.background)
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise InfeasibleSceneError(f"bad object_count range {self.object_count}")
        unknown = set(self.shapes) - set(SHAPES)
        if unknown:
            raise InfeasibleSceneError(f"unknown shapes {sorted(unknown)}")
        smin, smax = self.size_range
        if smin < 3 or smax < smin:
            raise InfeasibleSceneError(f"bad size_range {self.size_range}")
        if smax > min(self.image_size):
            raise InfeasibleSceneError(f"objects of size {smax} cannot fit in {self.image_size}")


@dataclass
class Sample:
    """One image with its objects.

    ``image`` is ``(3, H, W)`` float32 in [0, 1] (8-bit quantized); ``boxes`` are
    ``(n, 4)`` normalized ``(cx, cy, w, h)``; ``instance_map`` is ``(H, W)`` with
    the object index per pixel and -1 for background.
    """

    image: Optional[np.ndarray]
    boxes: np.ndarray
    labels: np.ndarray
    instance_map: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)


def shape_mask(kind: str, size: int) -> np.ndarray:
    """Boolean ``size x size`` raster of ``kind``, evaluated at pixel centers."""
    c = (np.arange(size) + 0.5)
    yy, xx = np.meshgrid(c, c, indexing="ij")
    if kind == "square":
        return np.ones((size, size), dtype=bool)
    if kind == "circle":
        r = size / 2
        return (xx - r) ** 2 + (yy - r) ** 2 <= r ** 2
    if kind == "triangle":
        # apex at top center, base along the bottom edge
        half = size / 2
        return np.abs(xx - half) <= half * yy / size
    raise ValueError(kind)


def _tight_box(mask: np.ndarray) -> Tuple[int, int, int, int]:
    rows = np.flatnonzero(mask.any(1))
    cols = np.flatnonzero(mask.any(0))
    return int(rows[0]), int(cols[0]), int(rows[-1]) + 1, int(cols[-1]) + 1


def render_sample(spec: SceneSpec, index: int, max_tries: int = 1000) -> Sample:
    rng = np.random.default_rng([spec.seed, index])
    h, w = spec.image_size
    lo, hi = spec.background
    base = rng.uniform(lo, hi, size=3)
    image = base[:, None, None] + rng.normal(0, spec.noise_std, size=(3, h, w))
    instance = np.full((h, w), -1, dtype=np.int64)
    n = int(rng.integers(spec.object_count[0], spec.object_count[1] + 1))
    boxes, labels = [], []
    taken = np.zeros((h, w), dtype=bool)
    for obj in range(n):
        for _ in range(max_tries):
            cls = int(rng.integers(len(spec.shapes)))
            size = int(rng.integers(spec.size_range[0], spec.size_range[1] + 1))
            top = int(rng.integers(0, h - size + 1))
            left = int(rng.integers(0, w - size + 1))
            m = shape_mask(spec.shapes[cls], size)
            r0, c0, r1, c1 = _tight_box(m)
            box = (top + r0, left + c0, top + r1, left + c1)
            # one pixel of clearance between boxes
            region = taken[max(box[0] - 1, 0):box[2] + 1, max(box[1] - 1, 0):box[3] + 1]
            if not region.any():
                break
        else:
            raise InfeasibleSceneError(f"could not place object {obj} in sample {index}")
        taken[box[0]:box[2], box[1]:box[3]] = True
        color = _object_color(rng, base, spec.min_contrast)
        full = np.zeros((h, w), dtype=bool)
        full[top:top + size, left:left + size] = m
        image[:, full] = color[:, None]
        instance[full] = obj
        y0, x0, y1, x1 = box
        boxes.append([(x0 + x1) / 2 / w, (y0 + y1) / 2 / h, (x1 - x0) / w, (y1 - y0) / h])
        labels.append(cls)
    image = np.round(np.clip(image, 0, 1) * 255) / 255
    return Sample(image.astype(np.float32), np.asarray(boxes, dtype=np.float32).reshape(-1, 4),
                  np.asarray(labels, dtype=np.int64), instance, {"index": index, "seed": spec.seed})


def _object_color(rng, background, min_contrast):
    for _ in range(100):
        color = rng.uniform(0.2, 1.0, size=3)
        if np.abs(color - background).mean() >= min_contrast:
            return color
    return np.where(background < 0.5, 1.0, 0.0)


def generate_dataset(spec: SceneSpec, count: int, start: int = 0) -> List[Sample]:
    """``count`` samples; sample ``i`` depends only on ``(spec, start + i)``."""
    if count < 1:
        raise ValueError("count must be >= 1")
    return [render_sample(spec, start + i) for i in range(count)]


def stack_images(samples) -> np.ndarray:
    return np.stack([s.image for s in samples])
