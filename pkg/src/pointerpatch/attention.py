"""Sparse deformable attention and dense dot-product attention, both traced.

Every forward call can return a trace of its attention decisions. Traces hold the
live tensors (they stay in the autograd graph), so attack losses computed on them
backpropagate to the input image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import torch
from torch import nn

from .sampling import bilinear_sample


class ConfigurationError(ValueError):
    """Raised when shapes or hyperparameters are inconsistent."""


@dataclass
class AttentionTrace:
    """Pointers and scores of one deformable attention layer.

    Shapes (batch first): ``reference_points`` ``(B, Q, 2)``; ``offsets``
    ``(B, H, Q, D, R, 2)`` in normalized units; ``scores`` ``(B, H, Q, D, R)``
    before the softmax. All coordinates are ``(x, y)``.
    """

    reference_points: torch.Tensor
    offsets: torch.Tensor
    scores: torch.Tensor
    stage: str = "encoder-self"

    @property
    def sampling_locations(self) -> torch.Tensor:
        return self.reference_points[:, None, :, None, None, :] + self.offsets

    @property
    def attention_weights(self) -> torch.Tensor:
        b, h, q, d, r = self.scores.shape
        return self.scores.reshape(b, h, q, d * r).softmax(-1).reshape(b, h, q, d, r)

    @property
    def shape(self) -> tuple:
        """``(H, Q, D, R)``"""
        return tuple(self.scores.shape[1:])

    def detach(self) -> "AttentionTrace":
        return AttentionTrace(self.reference_points.detach(), self.offsets.detach(),
                              self.scores.detach(), self.stage)

    def select(self, index) -> "AttentionTrace":
        """Slice the batch axis."""
        return AttentionTrace(self.reference_points[index], self.offsets[index],
                              self.scores[index], self.stage)


@dataclass
class DenseAttentionTrace:
    """Post-softmax weights ``(B, H, Q, K)`` of one dense layer; ``key_coords`` ``(K, 2)`` or None."""

    weights: torch.Tensor
    key_coords: Optional[torch.Tensor] = None
    stage: str = "dense"


class DeformableAttention(nn.Module):
    """Multi-head, multi-level deformable attention.

    Each query looks at ``num_points`` locations per head and level, placed at its
    reference point plus a predicted offset. Offsets and pre-softmax scores are
    linear functions of the query feature.
    """

    def __init__(self, channels: int, num_heads: int, num_levels: int, num_points: int):
        super().__init__()
        if channels % num_heads:
            raise ConfigurationError(f"channels {channels} not divisible by heads {num_heads}")
        self.channels = channels
        self.num_heads = num_heads
        self.num_levels = num_levels
        self.num_points = num_points
        self.head_dim = channels // num_heads
        self.sampling_offsets = nn.Linear(channels, num_heads * num_levels * num_points * 2)
        self.attention_weights = nn.Linear(channels, num_heads * num_levels * num_points)
        self.value_proj = nn.Linear(channels, channels)
        self.output_proj = nn.Linear(channels, channels)
        self.reset_parameters()

    def reset_parameters(self):
        nn.init.zeros_(self.sampling_offsets.weight)
        # start with each head looking in its own direction, points at growing radius
        theta = torch.arange(self.num_heads, dtype=torch.float32) * (2 * math.pi / self.num_heads)
        grid = torch.stack([theta.cos(), theta.sin()], -1)
        grid = grid / grid.abs().max(-1, keepdim=True)[0]
        grid = grid.view(self.num_heads, 1, 1, 2).repeat(1, self.num_levels, self.num_points, 1)
        for k in range(self.num_points):
            grid[:, :, k, :] *= k + 1
        with torch.no_grad():
            self.sampling_offsets.bias.copy_(grid.reshape(-1))
        nn.init.zeros_(self.attention_weights.weight)
        nn.init.zeros_(self.attention_weights.bias)
        nn.init.xavier_uniform_(self.value_proj.weight)
        nn.init.zeros_(self.value_proj.bias)
        nn.init.xavier_uniform_(self.output_proj.weight)
        nn.init.zeros_(self.output_proj.bias)

    def forward(self, query: torch.Tensor, reference_points: torch.Tensor,
                pyramid: Sequence[torch.Tensor], capture: bool = True, stage: str = "encoder-self"):
        """
        Args:
            query: ``(B, Q, C)`` features that predict pointers and scores.
            reference_points: ``(B, Q, 2)`` normalized ``(x, y)``.
            pyramid: ``D`` value grids, each ``(B, C, h_d, w_d)``.

        Returns:
            ``(output (B, Q, C), trace or None)``
        """
        if len(pyramid) != self.num_levels:
            raise ConfigurationError(f"expected {self.num_levels} levels, got {len(pyramid)}")
        b, nq, c = query.shape
        if c != self.channels:
            raise ConfigurationError(f"query has {c} channels, expected {self.channels}")
        H, D, R, Ch = self.num_heads, self.num_levels, self.num_points, self.head_dim

        raw = self.sampling_offsets(query).view(b, nq, H, D, R, 2)
        sizes = torch.tensor([[g.shape[-1], g.shape[-2]] for g in pyramid],
                             dtype=query.dtype, device=query.device)
        offsets = (raw / sizes[None, None, None, :, None, :]).permute(0, 2, 1, 3, 4, 5)
        scores = self.attention_weights(query).view(b, nq, H, D, R).permute(0, 2, 1, 3, 4)
        weights = scores.reshape(b, H, nq, D * R).softmax(-1).reshape(b, H, nq, D, R)
        locations = reference_points[:, None, :, None, None, :] + offsets

        out = query.new_zeros(b * H, nq, Ch)
        for d, grid in enumerate(pyramid):
            if grid.shape[1] != c:
                raise ConfigurationError(f"level {d} has {grid.shape[1]} channels, expected {c}")
            hd, wd = grid.shape[-2:]
            value = self.value_proj(grid.flatten(2).transpose(1, 2))            # B, hw, C
            value = value.transpose(1, 2).reshape(b * H, Ch, hd, wd)
            loc = locations[:, :, :, d].reshape(b * H, nq * R, 2)
            sampled = bilinear_sample(value, loc).view(b * H, nq, R, Ch)
            out = out + (sampled * weights[:, :, :, d].reshape(b * H, nq, R, 1)).sum(2)
        out = out.view(b, H, nq, Ch).transpose(1, 2).reshape(b, nq, c)
        out = self.output_proj(out)
        trace = AttentionTrace(reference_points, offsets, scores, stage) if capture else None
        return out, trace


def deformable_attention(queries, pyramid, refs, module: DeformableAttention, capture: bool = True):
    """Functional form: ``(outputs, trace)`` for ``module`` applied to ``queries``."""
    return module(queries, refs, pyramid, capture=capture)


class DenseAttention(nn.Module):
    """Multi-head dot-product attention over all keys.

    ``A_hqk ∝ exp(z_q^T U_h^T U'_h x_k / sqrt(C_h))``, normalized over keys; output
    ``sum_h W_h sum_k A_hqk W'_h x_k``. No biases.
    """

    def __init__(self, channels: int, num_heads: int):
        super().__init__()
        if channels % num_heads:
            raise ConfigurationError(f"channels {channels} not divisible by heads {num_heads}")
        self.channels = channels
        self.num_heads = num_heads
        self.head_dim = channels // num_heads
        self.query_proj = nn.Linear(channels, channels, bias=False)   # U_h stacked
        self.key_proj = nn.Linear(channels, channels, bias=False)     # U'_h stacked
        self.value_proj = nn.Linear(channels, channels, bias=False)   # W'_h stacked
        self.output_proj = nn.Linear(channels, channels, bias=False)  # [W_1 .. W_H]

    def forward(self, queries: torch.Tensor, keys: torch.Tensor,
                key_coords: Optional[torch.Tensor] = None, capture: bool = True):
        """``queries`` ``(B, Q, C)``, ``keys`` ``(B, K, C)`` -> ``(output (B, Q, C), trace)``."""
        b, nq, c = queries.shape
        if keys.shape[0] != b or keys.shape[-1] != c or c != self.channels:
            raise ConfigurationError(f"bad shapes: queries {tuple(queries.shape)}, keys {tuple(keys.shape)}")
        nk = keys.shape[1]
        H, Ch = self.num_heads, self.head_dim
        q = self.query_proj(queries).view(b, nq, H, Ch).transpose(1, 2)
        k = self.key_proj(keys).view(b, nk, H, Ch).transpose(1, 2)
        v = self.value_proj(keys).view(b, nk, H, Ch).transpose(1, 2)
        weights = (q @ k.transpose(-1, -2) / math.sqrt(Ch)).softmax(-1)      # B, H, Q, K
        out = (weights @ v).transpose(1, 2).reshape(b, nq, c)
        trace = DenseAttentionTrace(weights, key_coords) if capture else None
        return self.output_proj(out), trace


def dense_attention(queries, keys, module: DenseAttention, key_coords=None, capture: bool = True):
    """Functional form: ``(outputs, trace)``."""
    return module(queries, keys, key_coords=key_coords, capture=capture)
