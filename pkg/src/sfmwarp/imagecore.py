"""Raster containers, pyramid construction and resampling.

Two layouts are used throughout the package:

* ImageGrid -- a numpy array shaped ``(H, W, C)``; this is what the file readers
  return and what the synthetic renderer produces.
* Tensor batches -- ``torch.float64`` tensors shaped ``(B, C, H, W)`` consumed by
  every differentiable operation.

``to_tensor`` / ``to_grid`` convert between the two.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ContractError, DegenerateInputError

DTYPE = torch.float64


def as_grid(data) -> np.ndarray:
    """Return ``data`` as a float64 ``(H, W, C)`` array (2-D input gains a channel axis)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ContractError(f"image grid must be 2-D or 3-D, got shape {arr.shape}")
    return arr


def to_tensor(grid) -> torch.Tensor:
    """ImageGrid ``(H, W, C)`` -> tensor ``(1, C, H, W)``."""
    if isinstance(grid, torch.Tensor):
        t = grid.to(DTYPE)
        return t if t.dim() == 4 else t.unsqueeze(0)
    arr = as_grid(grid)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1))).unsqueeze(0).to(DTYPE)


def to_grid(tensor: torch.Tensor) -> np.ndarray:
    """Tensor ``(1, C, H, W)`` or ``(C, H, W)`` -> ImageGrid ``(H, W, C)``."""
    t = tensor.detach()
    if t.dim() == 4:
        if t.shape[0] != 1:
            raise ContractError("to_grid expects a single-item batch")
        t = t[0]
    return t.permute(1, 2, 0).cpu().numpy().astype(np.float64)


def level_shape(height: int, width: int, s: int) -> tuple[int, int]:
    f = 2 ** s
    return math.ceil(height / f), math.ceil(width / f)


def pyramid_shapes(height: int, width: int, levels: int) -> list[tuple[int, int]]:
    """Dimensions of every pyramid level, built by repeated ceil-halving."""
    shapes = [(height, width)]
    for _ in range(levels - 1):
        h, w = shapes[-1]
        shapes.append(((h + 1) // 2, (w + 1) // 2))
    return shapes


def max_levels(height: int, width: int) -> int:
    """Largest pyramid depth reachable with ``downsample2x`` (every halved level needs >= 2 px)."""
    n = 1
    h, w = height, width
    while h >= 2 and w >= 2:
        h, w = (h + 1) // 2, (w + 1) // 2
        n += 1
    return n


def downsample2x(img: torch.Tensor) -> torch.Tensor:
    """2x2 box average over the last two axes; odd trailing rows/cols average what exists.

    Computed as two pairwise means with the odd edge replicated, which is exact
    on constant regions (a plain four-term sum divided by 4 is not).
    """
    h, w = img.shape[-2:]
    if h < 2 or w < 2:
        raise DegenerateInputError(f"downsample2x needs at least 2x2 input, got {h}x{w}")
    if w % 2:
        img = torch.cat([img, img[..., -1:]], dim=-1)
    img = (img[..., 0::2] + img[..., 1::2]) / 2.0
    if h % 2:
        img = torch.cat([img, img[..., -1:, :]], dim=-2)
    return (img[..., 0::2, :] + img[..., 1::2, :]) / 2.0


def _lerp_axis(img: torch.Tensor, n_out: int, dim: int) -> torch.Tensor:
    n = img.shape[dim]
    pos = ((torch.arange(n_out, dtype=DTYPE) + 0.5) * (n / n_out) - 0.5).clamp(0.0, n - 1.0)
    i0 = torch.floor(pos).long()
    i1 = (i0 + 1).clamp(max=n - 1)
    f = (pos - i0.to(DTYPE)).to(img.dtype)
    shape = [1] * img.dim()
    shape[dim] = n_out
    a = img.index_select(dim, i0)
    b = img.index_select(dim, i1)
    return a + f.view(shape) * (b - a)


def upsample_bilinear(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Half-pixel-centre (align_corners=False) bilinear enlargement over the last two axes."""
    h, w = img.shape[-2:]
    if out_h < h or out_w < w:
        raise ContractError(f"upsample_bilinear cannot shrink {h}x{w} to {out_h}x{out_w}")
    if (out_h, out_w) == (h, w):
        return img
    # a + f (b - a) form: constants map to themselves exactly
    return _lerp_axis(_lerp_axis(img, out_w, img.dim() - 1), out_h, img.dim() - 2)


@dataclass(frozen=True)
class Pyramid:
    levels: list
    scale_factors: list

    def __len__(self):
        return len(self.levels)


def build_pyramid(img: torch.Tensor, levels: int) -> Pyramid:
    if levels < 1:
        raise ContractError("a pyramid needs at least one level")
    out = [img]
    for _ in range(levels - 1):
        out.append(downsample2x(out[-1]))
    return Pyramid(levels=out, scale_factors=[2 ** s for s in range(levels)])
