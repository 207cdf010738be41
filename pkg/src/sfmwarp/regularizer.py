"""Smoothness and sparseness priors on inverse depth and translation fields."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ContractError, DegenerateInputError


@dataclass(frozen=True)
class RegConfig:
    beta: float = 0.25
    base_weight: float = 0.01

    def weight(self, s: int) -> float:
        """Regularizer weight for the output downscaled by ``2**s``."""
        return self.base_weight / 2 ** s


def smoothness_pieces(grid: torch.Tensor, beta: float = 0.25) -> list[tuple[torch.Tensor, int]]:
    """Weighted absolute differences of ``grid`` with the pixel count each is averaged over."""
    if grid.dim() != 4:
        raise ContractError(f"grid must be (B, C, H, W), got {tuple(grid.shape)}")
    H, W = grid.shape[-2:]
    if H < 3 or W < 3:
        raise DegenerateInputError(f"smoothness needs at least 3x3 pixels, got {H}x{W}")
    dx = grid[..., :, 1:] - grid[..., :, :-1]
    dy = grid[..., 1:, :] - grid[..., :-1, :]
    dxx = dx[..., :, 1:] - dx[..., :, :-1]
    dyy = dy[..., 1:, :] - dy[..., :-1, :]
    dxy = dx[..., 1:, :] - dx[..., :-1, :]
    dyx = dy[..., :, 1:] - dy[..., :, :-1]
    out = [(beta * d.abs(), d.shape[-2] * d.shape[-1]) for d in (dx, dy)]
    out += [((1.0 - beta) * d.abs(), d.shape[-2] * d.shape[-1]) for d in (dxx, dyy, dxy, dyx)]
    return out


def smoothness_loss(grid: torch.Tensor, beta: float = 0.25) -> torch.Tensor:
    """First/second-order L1 smoothness of ``grid (B, C, H, W)``, one value per batch item.

    Each difference term is averaged over the pixels where its stencil fits
    (forward differences; last row/column dropped), then channels are summed.
    The cross term appears twice (xy and yx), as the two composed differences.
    """
    return sum(m.flatten(1).sum(1) / n for m, n in smoothness_pieces(grid, beta))


def sparseness_loss(field: torch.Tensor) -> torch.Tensor:
    """Mean over pixels of ``|tx| + |ty| + |tz|`` for ``field (B, 3, H, W)``."""
    return field.abs().sum(dim=1).mean(dim=(-2, -1))


def normalize_inverse_depth(inv_depth: torch.Tensor) -> torch.Tensor:
    """Divide each batch item by its own mean, removing the global scale."""
    mean = inv_depth.mean(dim=(-3, -2, -1), keepdim=True)
    if not bool((mean > 0).all()):
        raise ContractError("inverse depth must have a positive mean")
    return inv_depth / mean
