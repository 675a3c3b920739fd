"""Bilinear sampling in normalized [0, 1]^2 coordinates.

Pixel ``(i, j)`` of an ``h x w`` grid has its center at ``((j + 0.5) / w, (i + 0.5) / h)``
in ``(x, y)`` order. Locations that fall off the grid read zeros.
"""

import torch
import torch.nn.functional as F


def bilinear_sample(grid: torch.Tensor, locations: torch.Tensor) -> torch.Tensor:
    """Read ``grid`` at continuous ``locations``.

    Args:
        grid: ``(B, C, h, w)`` values.
        locations: ``(B, N, 2)`` normalized ``(x, y)`` positions.

    Returns:
        ``(B, N, C)`` interpolated values; zero padding outside the grid.
    """
    if grid.dim() != 4 or locations.dim() != 3 or locations.shape[-1] != 2:
        raise ValueError(f"bad shapes: grid {tuple(grid.shape)}, locations {tuple(locations.shape)}")
    out = F.grid_sample(grid, (2 * locations - 1).unsqueeze(2), mode="bilinear",
                        padding_mode="zeros", align_corners=False)
    return out.squeeze(-1).transpose(1, 2)


def grid_centers(height: int, width: int, device=None, dtype=torch.float32) -> torch.Tensor:
    """Normalized ``(x, y)`` centers of every cell, row-major, shape ``(height * width, 2)``."""
    ys = (torch.arange(height, device=device, dtype=dtype) + 0.5) / height
    xs = (torch.arange(width, device=device, dtype=dtype) + 0.5) / width
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([gx.reshape(-1), gy.reshape(-1)], dim=-1)
