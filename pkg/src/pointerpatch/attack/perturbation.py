"""Perturbation frames and how they are added to images."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .plan import PlanError, uses_source, uses_target


@dataclass
class PerturbationState:
    """Source frame ``E`` with mask ``M`` and target frame ``F`` with mask ``N``.

    Frames are image-shaped (``(3, h, w)`` or ``(V, 3, h, w)``); masks drop the
    channel axis. Either pair may be None when a strategy does not use it.
    """

    source_frame: Optional[torch.Tensor] = None
    target_frame: Optional[torch.Tensor] = None
    source_mask: Optional[torch.Tensor] = None
    target_mask: Optional[torch.Tensor] = None

    def __post_init__(self):
        for m in (self.source_mask, self.target_mask):
            if m is not None and not bool(((m == 0) | (m == 1)).all()):
                raise ValueError("masks must be binary")


def straight_through_clamp(x: torch.Tensor) -> torch.Tensor:
    """Clamp to [0, 1] in the forward pass; identity gradient."""
    return x + (x.clamp(0, 1) - x).detach()


def apply_perturbation(images: torch.Tensor, state: PerturbationState, strategy: str) -> torch.Tensor:
    """``X' = X + E*M`` (IP/OP), ``X + F*N`` (SP/ATT) or ``X + E*M + F*N`` (CP).

    Pixels outside the active masks are returned untouched; pixels inside are
    clamped to [0, 1] with a straight-through gradient.
    """
    use_src, use_tgt = uses_source(strategy), uses_target(strategy)
    if use_src and use_tgt and state.source_mask is not None and state.target_mask is not None:
        if bool((state.source_mask.bool() & state.target_mask.bool()).any()):
            raise PlanError("source and target masks overlap")
    delta = torch.zeros_like(images[:1])
    region = torch.zeros(images.shape[1:-3] + images.shape[-2:], dtype=torch.bool, device=images.device)
    if use_src:
        if state.source_frame is None or state.source_mask is None:
            raise ValueError(f"{strategy} needs a source frame and mask")
        delta = delta + state.source_frame * state.source_mask.to(images.dtype).unsqueeze(-3)
        region = region | state.source_mask.bool()
    if use_tgt:
        if state.target_frame is None or state.target_mask is None:
            raise ValueError(f"{strategy} needs a target frame and mask")
        delta = delta + state.target_frame * state.target_mask.to(images.dtype).unsqueeze(-3)
        region = region | state.target_mask.bool()
    perturbed = straight_through_clamp(images + delta)
    return torch.where(region.unsqueeze(-3), perturbed, images)
