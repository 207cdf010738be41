"""SSIM + L1 photometric error between a reference image and a synthesized one."""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ContractError
from .warp import WarpResult


@dataclass(frozen=True)
class PhotometricConfig:
    alpha: float = 0.15
    window: int = 3
    sigma: float = 1.5
    c1: float = 0.01 ** 2
    c2: float = 0.03 ** 2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ContractError("alpha must lie in [0, 1]")
        if self.window < 1 or self.window % 2 == 0:
            raise ContractError("SSIM window must be a positive odd size")
        if self.sigma <= 0 or self.c1 <= 0 or self.c2 <= 0:
            raise ContractError("sigma, c1 and c2 must be positive")


def gaussian_taps(size: int, sigma: float) -> list[float]:
    half = size // 2
    g = [math.exp(-((k - half) ** 2) / (2.0 * sigma ** 2)) for k in range(size)]
    total = sum(g)
    return [v / total for v in g]


def gaussian_window(size: int, sigma: float, dtype=torch.float64) -> torch.Tensor:
    g = torch.tensor(gaussian_taps(size, sigma), dtype=dtype)
    return torch.outer(g, g)


def _blur_axis(x: torch.Tensor, taps: list[float], dim: int) -> torch.Tensor:
    # zero padding; the caller renormalizes by the blurred all-ones image
    half = len(taps) // 2
    n = x.shape[dim]
    pad = [0, 0, 0, 0]
    pad[0 if dim == -1 else 2] = half
    pad[1 if dim == -1 else 3] = half
    xp = F.pad(x, pad)
    out = taps[0] * xp.narrow(dim, 0, n)
    for k in range(1, len(taps)):
        out = out + taps[k] * xp.narrow(dim, k, n)
    return out


def gaussian_blur(x: torch.Tensor, size: int, sigma: float) -> torch.Tensor:
    """Separable Gaussian average with taps cut at the border and renormalized."""
    taps = gaussian_taps(size, sigma)
    H, W = x.shape[-2:]
    ones = torch.ones(1, 1, H, W, dtype=x.dtype, device=x.device)
    norm = _blur_axis(_blur_axis(ones, taps, -1), taps, -2)
    return _blur_axis(_blur_axis(x, taps, -1), taps, -2) / norm


def ssim_map(a: torch.Tensor, b: torch.Tensor, cfg: PhotometricConfig = PhotometricConfig(),
             mask: torch.Tensor | None = None) -> torch.Tensor:
    """Per-pixel, per-channel SSIM with a Gaussian window.

    Near the border the window is cut to its in-bounds taps and renormalized, so
    every pixel uses a proper weighted average. A ``mask (B, 1, H, W)`` marks
    further pixels as unusable: they are dropped from every window the same way
    out-of-bounds taps are. ``a`` may have batch size 1 and is then broadcast
    against ``b``.
    """
    if a.shape[1:] != b.shape[1:] or a.shape[0] not in (1, b.shape[0]):
        raise ContractError(f"SSIM inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    C = a.shape[1]
    if mask is None:
        # unmasked: the moments of a are computed once for the whole batch
        mu_a, ea2 = gaussian_blur(torch.cat([a, a * a], dim=1), cfg.window, cfg.sigma).split(C, dim=1)
        mu_b, eb2, eab = gaussian_blur(torch.cat([b, b * b, a * b], dim=1), cfg.window, cfg.sigma).split(C, dim=1)
    else:
        if mask.shape[0] != b.shape[0] or mask.shape[-2:] != b.shape[-2:]:
            raise ContractError(f"SSIM mask {tuple(mask.shape)} does not match {tuple(b.shape)}")
        m = mask.to(b.dtype)
        a = a.expand_as(b)
        taps = gaussian_taps(cfg.window, cfg.sigma)
        den = _blur_axis(_blur_axis(m, taps, -1), taps, -2)
        den = torch.where(den > 0, den, torch.ones_like(den))
        stack = torch.cat([a, a * a, b, b * b, a * b], dim=1) * m
        moments = _blur_axis(_blur_axis(stack, taps, -1), taps, -2) / den
        mu_a, ea2, mu_b, eb2, eab = moments.split(C, dim=1)
    var_a = ea2 - mu_a * mu_a
    var_b = eb2 - mu_b * mu_b
    cov = eab - mu_a * mu_b

    num = (2.0 * mu_a * mu_b + cfg.c1) * (2.0 * cov + cfg.c2)
    den = (mu_a * mu_a + mu_b * mu_b + cfg.c1) * (var_a + var_b + cfg.c2)
    return num / den


def photometric_error(target: torch.Tensor, synth: WarpResult,
                      cfg: PhotometricConfig = PhotometricConfig()) -> torch.Tensor:
    """``alpha (1 - SSIM) / 2 + (1 - alpha) |target - synth|``, channel-averaged and masked.

    Returns a ``(B, 1, H, W)`` map that is exactly 0 wherever ``synth.mask`` is 0.
    Masked-out pixels are also kept out of the SSIM windows of their neighbours.
    A single ``target`` (batch size 1) is shared by every synthesized image.
    """
    image, mask = synth
    if target.shape[1:] != image.shape[1:] or target.shape[0] not in (1, image.shape[0]):
        raise ContractError(f"target {tuple(target.shape)} and synthesized {tuple(image.shape)} differ")
    if mask.shape[-2:] != target.shape[-2:]:
        raise ContractError("mask size does not match the images")
    s = ssim_map(target, image, cfg, mask)
    err = cfg.alpha * (1.0 - s) / 2.0 + (1.0 - cfg.alpha) * (target - image).abs()
    return err.mean(dim=1, keepdim=True) * mask


def reduce_error(err: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean over valid pixels, per batch item: ``sum(err) / max(sum(mask), 1)``."""
    if err.shape[-2:] != mask.shape[-2:] or err.shape[0] != mask.shape[0]:
        raise ContractError("error map and mask differ in size")
    total = err.flatten(1).sum(1)
    count = mask.flatten(1).sum(1).clamp(min=1.0)
    return total / count
