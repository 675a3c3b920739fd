"""Toy multi-camera scenes: agents on a ground plane seen through affine cameras.

Coordinates: the plane is normalized ``[0, 1]^2`` as ``(u, v)``; a camera maps it
affinely to normalized view coordinates ``(x, y)``, and view pixels are those
times the view size (pixel ``(i, j)`` has its center at ``((j + .5) / w, (i + .5) / h)``).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Sequence, Tuple

import numpy as np

from ..io import atomic_write_text


@dataclass
class CameraModel:
    """``view = matrix[:, :2] @ plane + matrix[:, 2]`` in normalized coordinates."""

    matrix: np.ndarray
    view_size: Tuple[int, int] = (48, 48)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64).reshape(2, 3)
        self.view_size = tuple(int(v) for v in self.view_size)
        if abs(np.linalg.det(self.matrix[:, :2])) < 1e-12:
            raise ValueError("camera linear part is singular")

    @property
    def linear(self) -> np.ndarray:
        return self.matrix[:, :2]

    @property
    def offset(self) -> np.ndarray:
        return self.matrix[:, 2]

    def to_view(self, plane_points) -> np.ndarray:
        p = np.asarray(plane_points, dtype=np.float64).reshape(-1, 2)
        return p @ self.linear.T + self.offset

    def to_plane(self, view_points) -> np.ndarray:
        v = np.asarray(view_points, dtype=np.float64).reshape(-1, 2)
        return (v - self.offset) @ np.linalg.inv(self.linear).T

    @classmethod
    def identity(cls, view_size=(48, 48)) -> "CameraModel":
        return cls(np.array([[1.0, 0, 0], [0, 1.0, 0]]), view_size)


def default_cameras(num_views: int = 4, view_size=(48, 48), scale: float = 0.68, seed: int = 0
                    ) -> List[CameraModel]:
    """Cameras looking at the whole plane from evenly spread rotations with mild shear."""
    rng = np.random.default_rng(seed)
    cams = []
    for v in range(num_views):
        theta = 2 * np.pi * v / num_views + rng.uniform(-0.2, 0.2)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        shear = np.array([[1.0, rng.uniform(-0.15, 0.15)], [0.0, 1.0]])
        lin = scale * rot @ shear
        off = np.array([0.5, 0.5]) - lin @ np.array([0.5, 0.5])
        cams.append(CameraModel(np.hstack([lin, off[:, None]]), view_size))
    return cams


def save_cameras(path, cameras: Sequence[CameraModel]):
    doc = {"cameras": [{"view": k, "matrix": c.matrix.tolist(), "view_size": list(c.view_size)}
                       for k, c in enumerate(cameras)]}
    atomic_write_text(path, json.dumps(doc, indent=2) + "\n")


def load_cameras(path) -> List[CameraModel]:
    doc = json.loads(Path(path).read_text())
    cams = sorted(doc["cameras"], key=lambda c: c["view"])
    return [CameraModel(np.asarray(c["matrix"]), tuple(c["view_size"])) for c in cams]


@dataclass
class MultiViewScene:
    agents: np.ndarray                      # (n, 2) plane positions
    cameras: List[CameraModel]
    colors: np.ndarray = None               # (n, 3)

    def __post_init__(self):
        self.agents = np.asarray(self.agents, dtype=np.float64).reshape(-1, 2)
        if len(self.agents) and ((self.agents < 0) | (self.agents > 1)).any():
            raise ValueError("agent positions must lie in the plane extent [0, 1]^2")
        if self.colors is None:
            self.colors = np.ones((len(self.agents), 3))


@dataclass
class MultiViewSample:
    views: np.ndarray                       # (V, 3, h, w) float32 in [0, 1]
    agents: np.ndarray                      # (n, 2) plane positions
    view_boxes: List[np.ndarray]            # per view (m, 4) normalized cxcywh
    view_agent_ids: List[np.ndarray]        # per view (m,) agent index of each box
    meta: dict = field(default_factory=dict)


def render_views(scene: MultiViewScene, radius: int = 3, background=None, noise_std: float = 0.03,
                 rng=None, distractors: int = 0) -> MultiViewSample:
    """Draw every agent as a disk in every view; agents landing outside a view are
    left out of that view's ground truth."""
    rng = rng if rng is not None else np.random.default_rng(0)
    if len(scene.cameras) < 2:
        raise ValueError("need at least 2 views")
    views, boxes, ids = [], [], []
    for cam in scene.cameras:
        h, w = cam.view_size
        base = background if background is not None else rng.uniform(0.05, 0.3, size=3)
        img = np.asarray(base, dtype=np.float64)[:, None, None] + rng.normal(0, noise_std, size=(3, h, w))
        yy, xx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        for _ in range(distractors):
            s = int(rng.integers(3, 6))
            r0, c0 = int(rng.integers(0, h - s)), int(rng.integers(0, w - s))
            img[:, r0:r0 + s, c0:c0 + s] = rng.uniform(0.3, 1.0, size=3)[:, None, None]
        vb, vi = [], []
        if len(scene.agents):
            pts = cam.to_view(scene.agents)
            for k, (x, y) in enumerate(pts):
                px, py = x * w, y * h
                if not (0 <= px < w and 0 <= py < h):
                    continue
                disk = (xx - px) ** 2 + (yy - py) ** 2 <= radius ** 2
                img[:, disk] = scene.colors[k][:, None]
                vb.append([x, y, 2 * radius / w, 2 * radius / h])
                vi.append(k)
        views.append(np.clip(img, 0, 1))
        boxes.append(np.asarray(vb, dtype=np.float32).reshape(-1, 4))
        ids.append(np.asarray(vi, dtype=np.int64))
    views = np.round(np.stack(views) * 255) / 255
    return MultiViewSample(views.astype(np.float32), scene.agents.astype(np.float32), boxes, ids)


@dataclass
class MultiViewSpec:
    num_views: int = 4
    view_size: Tuple[int, int] = (48, 48)
    agent_count: Tuple[int, int] = (2, 4)
    min_separation: float = 0.2
    margin: float = 0.1
    radius: int = 3
    distractors: int = 0
    camera_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        self.view_size = tuple(int(v) for v in self.view_size)
        self.agent_count = tuple(int(v) for v in self.agent_count)


def generate_multiview_dataset(spec: MultiViewSpec, count: int, start: int = 0,
                               cameras: Sequence[CameraModel] = None) -> List[MultiViewSample]:
    cameras = list(cameras) if cameras is not None else default_cameras(
        spec.num_views, spec.view_size, seed=spec.camera_seed)
    out = []
    for i in range(start, start + count):
        rng = np.random.default_rng([spec.seed, i])
        n = int(rng.integers(spec.agent_count[0], spec.agent_count[1] + 1))
        agents = []
        for _ in range(1000):
            if len(agents) == n:
                break
            p = rng.uniform(spec.margin, 1 - spec.margin, size=2)
            if all(np.linalg.norm(p - a) >= spec.min_separation for a in agents):
                agents.append(p)
        if len(agents) < n:
            raise ValueError(f"could not place {n} agents with separation {spec.min_separation}")
        colors = rng.uniform(0.5, 1.0, size=(n, 3))
        scene = MultiViewScene(np.asarray(agents).reshape(-1, 2), cameras, colors)
        sample = render_views(scene, spec.radius, rng=rng, distractors=spec.distractors)
        sample.meta = {"index": i, "seed": spec.seed}
        out.append(sample)
    return out
