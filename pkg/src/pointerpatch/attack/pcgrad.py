"""Gradient surgery between loss components and gradient aggregation across patches."""

from __future__ import annotations

from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch


def project_conflicting(gradients: Sequence[torch.Tensor], rng: Optional[np.random.Generator] = None
                        ) -> List[torch.Tensor]:
    """PCGrad projections: each gradient loses its component along every other
    gradient it conflicts with (negative dot product), visiting the others in a
    random order. Projections are taken against the original gradients.
    """
    if not gradients:
        raise ValueError("need at least one gradient")
    sizes = {g.numel() for g in gradients}
    if len(sizes) != 1:
        raise ValueError(f"gradients differ in length: {sorted(sizes)}")
    rng = rng if rng is not None else np.random.default_rng()
    originals = [g.reshape(-1) for g in gradients]
    projected = []
    for i, g in enumerate(originals):
        g = g.clone()
        others = [j for j in range(len(originals)) if j != i]
        for j in rng.permutation(others) if others else []:
            gj = originals[j]
            dot = torch.dot(g, gj)
            norm_sq = torch.dot(gj, gj)
            if dot < 0 and norm_sq > 0:
                g = g - dot / norm_sq * gj
        projected.append(g)
    return projected


def pcgrad(gradients: Sequence[torch.Tensor], rng: Optional[np.random.Generator] = None) -> torch.Tensor:
    """Sum of the PCGrad-projected gradients (flat)."""
    return torch.stack(project_conflicting(gradients, rng)).sum(0)


def aggregate_source_gradients(per_patch: Sequence[torch.Tensor], mode: str = "mean"
                               ) -> Tuple[torch.Tensor, Optional[int]]:
    """Combine the gradients one shared patch receives at its different placements.

    ``mean`` averages element-wise; ``max_norm`` returns the input with the
    largest L2 norm unchanged (lowest index on ties). Returns
    ``(gradient, chosen index or None)``.
    """
    if not per_patch:
        raise ValueError("need at least one patch gradient")
    shapes = {tuple(g.shape) for g in per_patch}
    if len(shapes) != 1:
        raise ValueError(f"patch gradients differ in shape: {sorted(shapes)}")
    if mode == "mean":
        return torch.stack(list(per_patch)).mean(0), None
    if mode == "max_norm":
        norms = [float(g.norm()) for g in per_patch]
        best = max(range(len(norms)), key=lambda i: (norms[i], -i))
        return per_patch[best], best
    raise ValueError(f"unknown aggregation mode {mode!r}")
