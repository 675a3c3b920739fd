"""A small deformable-transformer detector with observable attention.

Layout follows the usual deformable DETR pipeline at toy scale: strided conv
backbone -> multi-level tokens -> deformable encoder -> decoder with dense
self-attention and deformable cross-attention -> class and box heads.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from .attention import (AttentionTrace, ConfigurationError, DeformableAttention,
                        DenseAttention, DenseAttentionTrace)
from .sampling import grid_centers

BACKBONE_STRIDE = 8
CONTEXT_POOLS = ("none", "mean", "max")


@dataclass
class ModelConfig:
    num_layers: int = 2          # per stack: encoder and decoder each get this many
    num_heads: int = 4
    num_points: int = 4
    num_levels: int = 2
    channel_dim: int = 64
    num_queries: int = 10
    image_size: Tuple[int, int] = (64, 64)
    num_classes: int = 3
    ffn_dim: int = 128
    backbone_width: int = 32
    global_context: str = "max"   # pooled image summary added to tokens: none | mean | max

    def __post_init__(self):
        self.image_size = tuple(int(s) for s in self.image_size)
        for name in ("num_layers", "num_heads", "num_points", "num_levels", "channel_dim",
                     "num_queries", "num_classes", "ffn_dim", "backbone_width"):
            if int(getattr(self, name)) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if self.channel_dim % self.num_heads:
            raise ConfigurationError(
                f"channel_dim {self.channel_dim} must equal num_heads * head_dim")
        if not 1 <= self.num_levels <= 3:
            raise ConfigurationError("the 3-block backbone supports 1 to 3 levels")
        if self.global_context not in CONTEXT_POOLS:
            raise ConfigurationError(f"global_context must be one of {CONTEXT_POOLS}")
        h, w = self.image_size
        if h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise ConfigurationError(f"image size {self.image_size} not divisible by {BACKBONE_STRIDE}")

    @property
    def head_dim(self) -> int:
        return self.channel_dim // self.num_heads

    def level_shapes(self) -> List[Tuple[int, int]]:
        h, w = self.image_size
        shapes = [(h // s, w // s) for s in (2, 4, 8)]
        return shapes[3 - self.num_levels:]


@dataclass
class FeaturePyramid:
    """Per-level ``(B, C, h_d, w_d)`` grids over the normalized image frame."""

    levels: List[torch.Tensor]

    def __post_init__(self):
        channels = {lv.shape[1] for lv in self.levels}
        if len(channels) != 1:
            raise ConfigurationError(f"levels disagree on channel count: {sorted(channels)}")

    @property
    def num_levels(self) -> int:
        return len(self.levels)

    @property
    def shapes(self) -> List[Tuple[int, int]]:
        return [tuple(lv.shape[-2:]) for lv in self.levels]

    def flatten(self) -> torch.Tensor:
        return torch.cat([lv.flatten(2).transpose(1, 2) for lv in self.levels], 1)

    @classmethod
    def unflatten(cls, tokens: torch.Tensor, shapes: Sequence[Tuple[int, int]]) -> "FeaturePyramid":
        b, _, c = tokens.shape
        parts = tokens.split([h * w for h, w in shapes], 1)
        return cls([p.transpose(1, 2).reshape(b, c, h, w) for p, (h, w) in zip(parts, shapes)])


@dataclass
class DetectionOutput:
    """``logits`` ``(B, Q, num_classes + 1)`` with the last column meaning no object;
    ``boxes`` ``(B, Q, 4)`` as normalized ``(cx, cy, w, h)``."""

    logits: torch.Tensor
    boxes: torch.Tensor
    aux: List["DetectionOutput"] = field(default_factory=list)

    def select(self, index) -> "DetectionOutput":
        return DetectionOutput(self.logits[index], self.boxes[index])


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=2, padding=1), nn.GroupNorm(4, cout), nn.ReLU(),
        nn.Conv2d(cout, cout, 3, padding=1), nn.GroupNorm(4, cout), nn.ReLU(),
    )


class Backbone(nn.Module):
    """Three strided conv blocks (strides 2, 4, 8); the last ``num_levels`` become levels.

    With ``global_context`` a pooled (mean or max) summary of the coarsest block is
    added to every level, which gives each token an image-wide receptive field the
    way a deep backbone would.
    """

    def __init__(self, config: ModelConfig, in_channels: int = 3):
        super().__init__()
        w = config.backbone_width
        widths = [w // 2, w, w * 2]
        self.blocks = nn.ModuleList([_block(in_channels, widths[0]), _block(widths[0], widths[1]),
                                     _block(widths[1], widths[2])])
        self.num_levels = config.num_levels
        c = config.channel_dim
        self.input_proj = nn.ModuleList([
            nn.Sequential(nn.Conv2d(widths[i], c, 1), nn.GroupNorm(8, c))
            for i in range(3 - config.num_levels, 3)
        ])
        self.pool = config.global_context
        self.context = nn.Linear(widths[2], c) if self.pool != "none" else None

    def forward(self, images: torch.Tensor) -> FeaturePyramid:
        x = (images - 0.5) / 0.25
        feats = []
        for block in self.blocks:
            x = block(x)
            feats.append(x)
        levels = [proj(f) for proj, f in zip(self.input_proj, feats[3 - self.num_levels:])]
        if self.context is not None:
            pooled = feats[-1].mean((2, 3)) if self.pool == "mean" else feats[-1].amax((2, 3))
            ctx = self.context(pooled)[:, :, None, None]
            levels = [lv + ctx for lv in levels]
        return FeaturePyramid(levels)


def sine_embedding(points: torch.Tensor, channels: int, temperature: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding of normalized ``(x, y)`` points -> ``(..., channels)``."""
    half = channels // 2
    dim_t = torch.arange(half, dtype=points.dtype, device=points.device)
    dim_t = temperature ** (2 * (dim_t // 2) / half)
    scaled = points[..., None] * 2 * math.pi / dim_t             # ..., 2, half
    emb = torch.stack([scaled[..., 0::2].sin(), scaled[..., 1::2].cos()], -1).flatten(-2)
    return emb.flatten(-2)


class FFN(nn.Module):
    def __init__(self, channels, hidden):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(channels, hidden), nn.ReLU(), nn.Linear(hidden, channels))

    def forward(self, x):
        return self.net(x)


class EncoderLayer(nn.Module):
    def __init__(self, config: ModelConfig, num_levels: Optional[int] = None):
        super().__init__()
        c = config.channel_dim
        self.self_attn = DeformableAttention(c, config.num_heads, num_levels or config.num_levels,
                                             config.num_points)
        self.norm1 = nn.LayerNorm(c)
        self.ffn = FFN(c, config.ffn_dim)
        self.norm2 = nn.LayerNorm(c)

    def forward(self, src, pos, refs, shapes, capture=True):
        pyramid = FeaturePyramid.unflatten(src, shapes).levels
        out, trace = self.self_attn(src + pos, refs, pyramid, capture=capture, stage="encoder-self")
        src = self.norm1(src + out)
        src = self.norm2(src + self.ffn(src))
        return src, trace


class DecoderLayer(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        c = config.channel_dim
        self.self_attn = DenseAttention(c, config.num_heads)
        self.norm1 = nn.LayerNorm(c)
        self.cross_attn = DeformableAttention(c, config.num_heads, config.num_levels, config.num_points)
        self.norm2 = nn.LayerNorm(c)
        self.ffn = FFN(c, config.ffn_dim)
        self.norm3 = nn.LayerNorm(c)

    def forward(self, tgt, query_pos, refs, memory_levels, capture=True):
        q = tgt + query_pos
        out, _ = self.self_attn(q, q, capture=False)
        tgt = self.norm1(tgt + out)
        out, trace = self.cross_attn(tgt + query_pos, refs, memory_levels, capture=capture,
                                     stage="decoder-cross")
        tgt = self.norm2(tgt + out)
        tgt = self.norm3(tgt + self.ffn(tgt))
        return tgt, trace


def inverse_sigmoid(x, eps=1e-5):
    x = x.clamp(eps, 1 - eps)
    return torch.log(x / (1 - x))


class DeformableDetector(nn.Module):
    """Toy deformable DETR. ``forward`` returns ``(DetectionOutput, [AttentionTrace])``
    with encoder self-attention traces first, then decoder cross-attention traces."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.channel_dim
        self.backbone = Backbone(config)
        self.level_embed = nn.Parameter(torch.randn(config.num_levels, c) * 0.1)
        self.encoder = nn.ModuleList([EncoderLayer(config) for _ in range(config.num_layers)])
        self.decoder = nn.ModuleList([DecoderLayer(config) for _ in range(config.num_layers)])
        self.query_embed = nn.Embedding(config.num_queries, 2 * c)
        self.reference_head = nn.Linear(c, 2)
        self.class_head = nn.Linear(c, config.num_classes + 1)
        self.box_head = nn.Sequential(nn.Linear(c, c), nn.ReLU(), nn.Linear(c, 4))
        nn.init.zeros_(self.box_head[-1].weight)
        nn.init.constant_(self.box_head[-1].bias, 0.0)
        with torch.no_grad():
            self.box_head[-1].bias[2:] = -1.5
        nn.init.xavier_uniform_(self.reference_head.weight)
        nn.init.zeros_(self.reference_head.bias)

    def _check_input(self, images):
        if images.dim() != 4 or images.shape[1] != 3:
            raise ConfigurationError(f"expected (B, 3, H, W) images, got {tuple(images.shape)}")
        if tuple(images.shape[-2:]) != self.config.image_size:
            raise ConfigurationError(
                f"image size {tuple(images.shape[-2:])} != configured {self.config.image_size}")

    def encode(self, images, capture=True):
        self._check_input(images)
        pyramid = self.backbone(images)
        shapes = pyramid.shapes
        b = images.shape[0]
        c = self.config.channel_dim
        refs = torch.cat([grid_centers(h, w, images.device, images.dtype) for h, w in shapes])
        pos = torch.cat([sine_embedding(grid_centers(h, w, images.device, images.dtype), c)
                         + self.level_embed[d] for d, (h, w) in enumerate(shapes)])
        refs = refs.expand(b, -1, -1)
        pos = pos.expand(b, -1, -1)
        src = pyramid.flatten()
        traces = []
        for layer in self.encoder:
            src, trace = layer(src, pos, refs, shapes, capture=capture)
            traces.append(trace)
        return FeaturePyramid.unflatten(src, shapes), traces

    def forward(self, images: torch.Tensor, capture: bool = True):
        memory, traces = self.encode(images, capture=capture)
        b = images.shape[0]
        c = self.config.channel_dim
        query_pos, tgt = self.query_embed.weight.split(c, dim=1)
        query_pos = query_pos.expand(b, -1, -1)
        tgt = tgt.expand(b, -1, -1)
        refs = self.reference_head(query_pos).sigmoid()
        outputs = []
        for layer in self.decoder:
            tgt, trace = layer(tgt, query_pos, refs, memory.levels, capture=capture)
            traces.append(trace)
            outputs.append(self._heads(tgt, refs))
        final = outputs[-1]
        final.aux = outputs[:-1]
        return final, (traces if capture else [])

    def _heads(self, tgt, refs):
        delta = self.box_head(tgt)
        centers = (delta[..., :2] + inverse_sigmoid(refs)).sigmoid()
        sizes = delta[..., 2:].sigmoid()
        return DetectionOutput(self.class_head(tgt), torch.cat([centers, sizes], -1))


def forward_detector(model: DeformableDetector, batch: torch.Tensor, capture: bool = True):
    """Run ``model`` on ``batch`` (pixels in [0, 1]) -> ``(DetectionOutput, traces)``."""
    return model(batch, capture=capture)


class DenseReferenceEncoder(nn.Module):
    """Dense-attention encoder over the coarsest backbone level.

    This is the reference path the dense attention baseline was designed for;
    traces carry the full ``Q x K`` weight matrices and key coordinates.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = ModelConfig(**{**config.__dict__, "num_levels": 1})
        c = config.channel_dim
        self.backbone = Backbone(self.config)
        self.layers = nn.ModuleList([DenseAttention(c, config.num_heads) for _ in range(config.num_layers)])
        self.norms = nn.ModuleList([nn.LayerNorm(c) for _ in range(config.num_layers)])

    def forward(self, images: torch.Tensor, capture: bool = True):
        pyramid = self.backbone(images)
        h, w = pyramid.shapes[0]
        coords = grid_centers(h, w, images.device, images.dtype)
        pos = sine_embedding(coords, self.config.channel_dim)
        x = pyramid.flatten()
        traces: List[DenseAttentionTrace] = []
        for attn, norm in zip(self.layers, self.norms):
            out, trace = attn(x + pos, x + pos, key_coords=coords, capture=capture)
            x = norm(x + out)
            if capture:
                traces.append(trace)
        return x, traces


def build_model(config: ModelConfig, seed: int = 0) -> DeformableDetector:
    torch.manual_seed(seed)
    return DeformableDetector(config)
