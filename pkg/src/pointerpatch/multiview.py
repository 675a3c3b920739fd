"""Toy shadow-transformer multi-view detector on a shared ground plane.

Per-view features are resampled onto the plane grid through each camera; a
deformable encoder then attends across views (the level axis indexes views) and
a small head predicts an occupancy heatmap over the plane.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .attack.plan import PatchPlan, PlanError, build_mask, to_pixels
from .attention import AttentionTrace, ConfigurationError, DeformableAttention
from .data.multiview_scene import CameraModel, MultiViewSample
from .detector import CONTEXT_POOLS, FFN, sine_embedding
from .evaluation import dataset_moda
from .io import load_state, read_checkpoint, save_checkpoint
from .sampling import bilinear_sample, grid_centers

log = logging.getLogger(__name__)


@dataclass
class MultiViewConfig:
    num_views: int = 4
    view_size: Tuple[int, int] = (48, 48)
    plane_size: Tuple[int, int] = (16, 16)
    num_layers: int = 1
    num_heads: int = 2
    num_points: int = 4
    channel_dim: int = 32
    ffn_dim: int = 64
    backbone_width: int = 16
    global_context: str = "max"
    peak_threshold: float = 0.5
    peak_radius: int = 1
    match_distance: float = 0.1

    def __post_init__(self):
        self.view_size = tuple(int(v) for v in self.view_size)
        self.plane_size = tuple(int(v) for v in self.plane_size)
        if self.channel_dim % self.num_heads:
            raise ConfigurationError("channel_dim must equal num_heads * head_dim")
        if self.global_context not in CONTEXT_POOLS:
            raise ConfigurationError(f"global_context must be one of {CONTEXT_POOLS}")
        if self.view_size[0] % 4 or self.view_size[1] % 4:
            raise ConfigurationError("view size must be divisible by 4")

    @property
    def head_dim(self) -> int:
        return self.channel_dim // self.num_heads


@dataclass
class GroundPlaneGrid:
    """Per-view plane-aligned features ``(B, V, C, Hg, Wg)`` and validity ``(V, Hg, Wg)``."""

    features: torch.Tensor
    valid: torch.Tensor


@dataclass
class WorldHeatmap:
    probabilities: np.ndarray                    # (Hg, Wg) in [0, 1]
    peaks: List[Tuple[float, float, float]]      # (x, y, score), plane-normalized

    @property
    def positions(self) -> np.ndarray:
        return np.asarray([(x, y) for x, y, _ in self.peaks], dtype=np.float32).reshape(-1, 2)


def _camera_grid(camera: CameraModel, plane_size, device=None, dtype=torch.float32):
    hg, wg = plane_size
    cells = grid_centers(hg, wg, device, dtype)
    lin = torch.as_tensor(camera.linear, dtype=dtype, device=device)
    off = torch.as_tensor(camera.offset, dtype=dtype, device=device)
    view_pts = cells @ lin.T + off
    valid = ((view_pts >= 0) & (view_pts < 1)).all(-1)
    return view_pts, valid.reshape(hg, wg)


def project_view_features(view_features: torch.Tensor, camera: CameraModel, plane_size=(16, 16)):
    """Resample ``(B, C, h, w)`` view features onto the plane grid.

    Returns ``(plane features (B, C, Hg, Wg), valid mask (Hg, Wg))``; cells whose
    camera image falls outside the view are zero with mask 0.
    """
    b, c = view_features.shape[:2]
    hg, wg = plane_size
    pts, valid = _camera_grid(camera, plane_size, view_features.device, view_features.dtype)
    sampled = bilinear_sample(view_features, pts.expand(b, -1, -1))          # B, HgWg, C
    sampled = sampled * valid.reshape(1, -1, 1).to(sampled.dtype)
    return sampled.transpose(1, 2).reshape(b, c, hg, wg), valid.to(view_features.dtype)


def project_patch_locations(view_locations, camera: CameraModel) -> np.ndarray:
    """Map normalized view ``(x, y)`` points to plane coordinates; error off the plane."""
    plane = camera.to_plane(view_locations)
    if ((plane < 0) | (plane > 1)).any():
        raise PlanError(f"locations map outside the ground plane: {plane.tolist()}")
    return plane


class ShadowLayer(nn.Module):
    def __init__(self, config: MultiViewConfig):
        super().__init__()
        c = config.channel_dim
        self.attn = DeformableAttention(c, config.num_heads, config.num_views, config.num_points)
        self.norm1 = nn.LayerNorm(c)
        self.ffn = FFN(c, config.ffn_dim)
        self.norm2 = nn.LayerNorm(c)

    def forward(self, query, pos, refs, view_planes, capture=True):
        out, trace = self.attn(query + pos, refs, view_planes, capture=capture, stage="shadow")
        query = self.norm1(query + out)
        return self.norm2(query + self.ffn(query)), trace


class ShadowTransformer(nn.Module):
    """Plane tokens attend to per-view plane features; one level per view."""

    def __init__(self, config: MultiViewConfig):
        super().__init__()
        self.config = config
        c = config.channel_dim
        self.layers = nn.ModuleList([ShadowLayer(config) for _ in range(config.num_layers)])
        self.view_embed = nn.Parameter(torch.zeros(config.num_views, c))

    def forward(self, view_planes: Sequence[torch.Tensor], valid: Optional[torch.Tensor] = None,
                capture: bool = True):
        if len(view_planes) != self.config.num_views:
            raise ConfigurationError(f"got {len(view_planes)} views, configured {self.config.num_views}")
        b, c, hg, wg = view_planes[0].shape
        stacked = torch.stack(list(view_planes), 1)                               # B, V, C, Hg, Wg
        if valid is None:
            valid = torch.ones(len(view_planes), hg, wg, dtype=stacked.dtype, device=stacked.device)
        weight = valid[None, :, None]
        query = (stacked * weight).sum(1) / weight.sum(1).clamp(min=1)
        query = query.flatten(2).transpose(1, 2)                                  # B, HgWg, C
        refs = grid_centers(hg, wg, stacked.device, stacked.dtype).expand(b, -1, -1)
        pos = sine_embedding(refs[0], c).expand(b, -1, -1)
        values = [vp + self.view_embed[v][None, :, None, None] for v, vp in enumerate(view_planes)]
        traces = []
        for layer in self.layers:
            query, trace = layer(query, pos, refs, values, capture=capture)
            if capture:
                traces.append(trace)
        return query.transpose(1, 2).reshape(b, c, hg, wg), traces


def shadow_aggregate(view_planes, module: ShadowTransformer, valid=None, capture: bool = True):
    """-> ``(plane output features (B, C, Hg, Wg), traces)``"""
    return module(view_planes, valid, capture=capture)


def find_peaks(prob: np.ndarray, threshold: float, radius: int):
    """Cells above ``threshold`` that are the maximum of their ``(2r+1)^2`` window.

    Tied maxima within one window (plateaus) yield a single peak, the first in
    row-major order.
    """
    t = torch.as_tensor(prob, dtype=torch.float64)[None, None]
    pooled = F.max_pool2d(t, 2 * radius + 1, stride=1, padding=radius)
    is_peak = (t == pooled) & (t > threshold)
    rows, cols = np.nonzero(is_peak[0, 0].numpy())
    order = sorted(zip(rows.tolist(), cols.tolist()), key=lambda rc: (-prob[rc], rc))
    kept = []
    for r, c in order:
        if all(max(abs(r - r2), abs(c - c2)) > radius for r2, c2 in kept):
            kept.append((r, c))
    hg, wg = prob.shape
    return [((c + 0.5) / wg, (r + 0.5) / hg, float(prob[r, c])) for r, c in kept]


def decode_world_heatmap(logits, threshold: float = 0.5, radius: int = 1) -> WorldHeatmap:
    """Sigmoid occupancy plus local-maximum peaks above ``threshold``."""
    logits = torch.as_tensor(logits).detach().double()
    prob = logits.sigmoid().cpu().numpy()
    return WorldHeatmap(prob, find_peaks(prob, threshold, radius))


def _view_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GroupNorm(4, cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(4, cout), nn.ReLU(),
    )


class MultiViewDetector(nn.Module):
    """Views ``(B, V, 3, h, w)`` -> plane occupancy logits ``(B, Hg, Wg)`` and shadow traces."""

    def __init__(self, config: MultiViewConfig, cameras: Sequence[CameraModel]):
        super().__init__()
        if len(cameras) != config.num_views:
            raise ConfigurationError(f"{len(cameras)} cameras for {config.num_views} views")
        self.config = config
        self.cameras = list(cameras)
        w = config.backbone_width
        c = config.channel_dim
        self.backbone = nn.Sequential(_view_block(3, w), _view_block(w, 2 * w))
        self.proj = nn.Sequential(nn.Conv2d(2 * w, c, 1), nn.GroupNorm(8, c))
        self.context = nn.Linear(2 * w, c) if config.global_context != "none" else None
        self.shadow = ShadowTransformer(config)
        self.head = nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.ReLU(), nn.Conv2d(c, 1, 1))
        nn.init.constant_(self.head[-1].bias, -2.0)

    def view_features(self, views):
        b, v = views.shape[:2]
        x = views.reshape(b * v, *views.shape[2:])
        f = self.backbone((x - 0.5) / 0.25)
        out = self.proj(f)
        if self.context is not None:
            pooled = f.mean((2, 3)) if self.config.global_context == "mean" else f.amax((2, 3))
            out = out + self.context(pooled)[:, :, None, None]
        return out.reshape(b, v, *out.shape[1:])

    def forward(self, views: torch.Tensor, capture: bool = True):
        if views.dim() != 5 or views.shape[1] != self.config.num_views:
            raise ConfigurationError(f"expected (B, {self.config.num_views}, 3, h, w), got {tuple(views.shape)}")
        feats = self.view_features(views)
        planes, valid = [], []
        for v, cam in enumerate(self.cameras):
            p, m = project_view_features(feats[:, v], cam, self.config.plane_size)
            planes.append(p)
            valid.append(m)
        out, traces = self.shadow(planes, torch.stack(valid), capture=capture)
        return self.head(out)[:, 0], traces


def target_heatmap(agents: np.ndarray, plane_size, sigma: float = 0.7) -> np.ndarray:
    """Gaussian bumps (in cells) at agent positions, max-combined."""
    hg, wg = plane_size
    yy, xx = np.meshgrid(np.arange(hg) + 0.5, np.arange(wg) + 0.5, indexing="ij")
    heat = np.zeros((hg, wg))
    for u, v in np.asarray(agents).reshape(-1, 2):
        heat = np.maximum(heat, np.exp(-((xx - u * wg) ** 2 + (yy - v * hg) ** 2) / (2 * sigma ** 2)))
    return heat.astype(np.float32)


def heatmap_loss(logits: torch.Tensor, samples: Sequence[MultiViewSample], plane_size) -> torch.Tensor:
    """Pixel-wise BCE against Gaussian targets, positives up-weighted."""
    target = torch.as_tensor(np.stack([target_heatmap(s.agents, plane_size) for s in samples]),
                             dtype=logits.dtype, device=logits.device)
    weight = 1 + 9 * target
    return F.binary_cross_entropy_with_logits(logits, target, weight=weight)


def detect(model: MultiViewDetector, views: torch.Tensor, batch_size: int = 20):
    """Plane peak positions per frame (and the traces when asked)."""
    cfg = model.config
    positions = []
    with torch.no_grad():
        for i in range(0, len(views), batch_size):
            logits, _ = model(views[i:i + batch_size], capture=False)
            for lg in logits:
                positions.append(decode_world_heatmap(lg, cfg.peak_threshold, cfg.peak_radius).positions)
    return positions


def evaluate_moda(model: MultiViewDetector, samples, views: Optional[torch.Tensor] = None):
    if views is None:
        views = torch.from_numpy(np.stack([s.views for s in samples]))
    dets = detect(model, views)
    return dataset_moda(dets, [s.agents for s in samples], model.config.match_distance)


@dataclass
class MultiViewTrainConfig:
    epochs: int = 40
    batch_size: int = 8
    lr: float = 2e-3
    weight_decay: float = 1e-4
    seed: int = 0
    log_every: int = 10


def train_multiview_detector(dataset, config: MultiViewConfig, cameras, train=MultiViewTrainConfig(),
                             eval_set=None) -> MultiViewDetector:
    torch.manual_seed(train.seed)
    model = MultiViewDetector(config, cameras)
    rng = np.random.default_rng(train.seed)
    views = torch.from_numpy(np.stack([s.views for s in dataset]))
    opt = torch.optim.AdamW(model.parameters(), lr=train.lr, weight_decay=train.weight_decay)
    steps = train.epochs * math.ceil(len(dataset) / train.batch_size)
    sched = torch.optim.lr_scheduler.OneCycleLR(opt, max_lr=train.lr, total_steps=steps, pct_start=0.1)
    model.train()
    for epoch in range(train.epochs):
        order = rng.permutation(len(dataset))
        total = 0.0
        for i in range(0, len(order), train.batch_size):
            idx = order[i:i + train.batch_size]
            logits, _ = model(views[idx], capture=False)
            loss = heatmap_loss(logits, [dataset[k] for k in idx], config.plane_size)
            if not torch.isfinite(loss):
                from .training import TrainingDiverged
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
            opt.step()
            sched.step()
            total += loss.item() * len(idx)
        if train.log_every and (epoch + 1) % train.log_every == 0:
            msg = f"epoch {epoch + 1}/{train.epochs} loss {total / len(dataset):.4f}"
            if eval_set is not None:
                msg += f" MODA {evaluate_moda(model, eval_set).moda:.3f}"
            log.info(msg)
    model.eval()
    return model


def save_multiview(path, model: MultiViewDetector, meta=None):
    from dataclasses import asdict
    meta = dict(meta or {})
    meta["cameras"] = [{"matrix": c.matrix.tolist(), "view_size": list(c.view_size)} for c in model.cameras]
    save_checkpoint(path, model, model.config, kind="multiview", meta=meta)


def load_multiview(path) -> MultiViewDetector:
    header, arrays = read_checkpoint(path)
    if header["kind"] != "multiview":
        raise ValueError(f"{path} holds a {header['kind']!r}, not a multiview model")
    cams = [CameraModel(np.asarray(c["matrix"]), tuple(c["view_size"])) for c in header["meta"]["cameras"]]
    model = MultiViewDetector(MultiViewConfig(**header["config"]), cams)
    load_state(model, arrays)
    model.eval()
    return model


class MultiViewSurface:
    """Attack surface: perturbations live in view pixels, targets are projected to the plane."""

    metric_name = "moda"

    def __init__(self, model: MultiViewDetector):
        self.model = model
        cfg = model.config
        self.spatial = cfg.view_size
        self.frame_shape = (cfg.num_views, 3) + tuple(cfg.view_size)
        self.num_points = cfg.num_points

    def images(self, samples) -> torch.Tensor:
        return torch.from_numpy(np.stack([s.views for s in samples]))

    def forward(self, views, capture=True):
        return self.model(views, capture=capture)

    def model_loss(self, logits, samples):
        return heatmap_loss(logits, samples, self.model.config.plane_size)

    def evaluate(self, views, samples, capture=True):
        cfg = self.model.config
        positions, traces = [], []
        with torch.no_grad():
            for i in range(0, len(views), 20):
                logits, tr = self.model(views[i:i + 20], capture=capture)
                traces.extend(tr)
                for lg in logits:
                    positions.append(decode_world_heatmap(lg, cfg.peak_threshold, cfg.peak_radius).positions)
        result = dataset_moda(positions, [s.agents for s in samples], cfg.match_distance)
        return result.moda, traces

    def _views(self, plan, role):
        locs = plan.source_locations if role == "source" else plan.target_locations
        views = plan.source_views if role == "source" else plan.target_views
        if locs and len(views) != len(locs):
            raise PlanError("multi-view plans need a view index for every location")
        return locs, views

    def masks(self, plan: PatchPlan):
        V = self.model.config.num_views
        h, w = self.spatial
        out = []
        for role, edge in (("source", plan.patch_edge), ("target", plan.target_patch_edge)):
            locs, views = self._views(plan, role)
            m = np.zeros((V, h, w), dtype=bool)
            for loc, v in zip(locs, views):
                if not 0 <= v < V:
                    raise PlanError(f"view {v} out of range")
                m[v] |= build_mask([to_pixels(loc, (h, w))], edge, (h, w))
            out.append(torch.from_numpy(m).float())
        return tuple(out)

    def placements(self, plan, role):
        locs, views = self._views(plan, role)
        return [(k, v) + to_pixels(l, self.spatial) for k, (l, v) in enumerate(zip(locs, views))]

    def target_points(self, plan) -> np.ndarray:
        """Plane targets: the k-th target patch of every view is one anchor, so their
        projected centers are averaged into one point per k."""
        h, w = self.spatial
        e = plan.target_patch_edge
        groups: dict = {}
        seen: dict = {}
        for _, v, r, c in self.placements(plan, "target"):
            k = seen.get(v, 0)
            seen[v] = k + 1
            center = np.array([(c + e / 2) / w, (r + e / 2) / h])
            groups.setdefault(k, []).append(project_patch_locations(center, self.model.cameras[v])[0])
        pts = [np.mean(groups[k], axis=0) for k in sorted(groups)]
        return np.asarray(pts, dtype=np.float32).reshape(-1, 2)

    def target_rects(self, plan):
        h, w = self.spatial
        e = plan.target_patch_edge
        rects = []
        for _, v, r, c in self.placements(plan, "target"):
            corners = np.array([[c / w, r / h], [(c + e) / w, r / h], [c / w, (r + e) / h],
                                [(c + e) / w, (r + e) / h]])
            plane = self.model.cameras[v].to_plane(corners)
            lo, hi = plane.min(0), plane.max(0)
            rects.append((float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])))
        return rects


TARGET_ANCHORS = ((0.22, 0.22), (0.78, 0.78), (0.22, 0.78), (0.78, 0.22))
SOURCE_ANCHORS = ((0.5, 0.5), (0.5, 0.1), (0.1, 0.5), (0.9, 0.5))


def _corner_in_view(point, camera: CameraModel, edge: int):
    h, w = camera.view_size
    x, y = camera.to_view(point)[0]
    r = int(np.clip(round(y * h - edge / 2), 0, h - edge))
    c = int(np.clip(round(x * w - edge / 2), 0, w - edge))
    return r / h, c / w


def make_multiview_plan(cameras: Sequence[CameraModel], adversarial_views: Sequence[int],
                        patch_edge: int = 8, target_edge: Optional[int] = None, strategy: str = "CP",
                        sources_per_view: int = 1, targets_per_view: int = 1,
                        target_anchors=TARGET_ANCHORS, source_anchors=SOURCE_ANCHORS) -> PatchPlan:
    """Patches anchored on shared ground-plane points and drawn in every adversarial view.

    Each anchor is mapped into a view through its camera and the patch is
    centered there (clipped to the view), so all views show it at the same
    plane position.
    """
    te = target_edge or patch_edge
    if targets_per_view > len(target_anchors) or sources_per_view > len(source_anchors):
        raise PlanError("more patches per view than anchor points")
    src_locs, src_views, tgt_locs, tgt_views = [], [], [], []
    for v in adversarial_views:
        if not 0 <= v < len(cameras):
            raise PlanError(f"view {v} out of range")
        for anchor in target_anchors[:targets_per_view]:
            tgt_locs.append(_corner_in_view(anchor, cameras[v], te))
            tgt_views.append(v)
        if strategy in ("IP", "OP", "CP"):
            for anchor in source_anchors[:sources_per_view]:
                src_locs.append(_corner_in_view(anchor, cameras[v], patch_edge))
                src_views.append(v)
    return PatchPlan(source_locations=src_locs, target_locations=tgt_locs, patch_edge=patch_edge,
                     target_edge=target_edge, source_views=src_views, target_views=tgt_views)
