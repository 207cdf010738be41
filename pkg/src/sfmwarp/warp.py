"""Image synthesis from a flow field: bilinear gather and exponential-weight splatting."""
from __future__ import annotations

from typing import NamedTuple

import torch

from .errors import ContractError
from .geometry import FlowField

SPLAT_OFFSETS = (-1, 0, 1)
# landing points this close outside the image still count as in view, so that
# roundoff on an identity flow does not mask out the border
VIEW_TOL = 1e-9


class WarpResult(NamedTuple):
    image: torch.Tensor  # (B, C, H, W)
    mask: torch.Tensor  # (B, 1, H, W), 1.0 where the image value is defined


class SplatDebug(NamedTuple):
    weight_total: torch.Tensor  # raw exponential weight reaching each target
    normalized_sum: torch.Tensor  # sum of normalized weights; 1 wherever mask == 1
    contributors: torch.Tensor  # number of source pixels reaching each target


def _check_flow(flow: FlowField, batch: int) -> None:
    shp = flow.u.shape
    if flow.u.dim() != 4 or shp[1] != 1:
        raise ContractError(f"flow components must be (B, 1, H, W), got {tuple(shp)}")
    for name in ("v", "z", "valid"):
        if getattr(flow, name).shape != shp:
            raise ContractError(f"flow component {name} has shape {tuple(getattr(flow, name).shape)}, "
                                f"expected {tuple(shp)}")
    if shp[0] != batch:
        raise ContractError(f"flow batch {shp[0]} does not match image batch {batch}")


def sample_bilinear(src: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """Bilinear gather of ``src (B, C, Hs, Ws)`` at column ``u`` / row ``v`` ``(B, 1, H, W)``.

    Coordinates are clamped into the image first; callers mask anything that was
    outside.
    """
    B, C, Hs, Ws = src.shape
    u = u.clamp(0.0, Ws - 1.0)
    v = v.clamp(0.0, Hs - 1.0)
    x0f = torch.floor(u).detach()
    y0f = torch.floor(v).detach()
    wx = u - x0f
    wy = v - y0f
    x0 = x0f.long()
    y0 = y0f.long()
    x1 = (x0 + 1).clamp(max=Ws - 1)
    y1 = (y0 + 1).clamp(max=Hs - 1)
    flat = src.reshape(B, C, Hs * Ws)
    H, W = u.shape[-2:]

    def gather(yy, xx):
        idx = (yy * Ws + xx).reshape(B, 1, H * W).expand(B, C, H * W)
        return flat.gather(2, idx).reshape(B, C, H, W)

    top = gather(y0, x0) * (1.0 - wx) + gather(y0, x1) * wx
    bottom = gather(y1, x0) * (1.0 - wx) + gather(y1, x1) * wx
    return top * (1.0 - wy) + bottom * wy


def inverse_warp(src: torch.Tensor, flow: FlowField) -> WarpResult:
    """Synthesize the reference view by sampling ``src`` at each flow landing point.

    The mask is 0 where the flow is invalid or the landing point leaves
    ``[0, W-1] x [0, H-1]`` of ``src`` (by more than ``VIEW_TOL``); the image
    is 0 there as well.
    """
    if src.dim() != 4:
        raise ContractError(f"src must be (B, C, H, W), got {tuple(src.shape)}")
    _check_flow(flow, src.shape[0])
    Hs, Ws = src.shape[-2:]
    lo = -VIEW_TOL
    inside = (flow.valid & (flow.u >= lo) & (flow.u <= Ws - 1 - lo)
              & (flow.v >= lo) & (flow.v <= Hs - 1 - lo))
    zero = torch.zeros_like(flow.u)
    u = torch.where(inside, flow.u, zero)
    v = torch.where(inside, flow.v, zero)
    mask = inside.to(src.dtype)
    return WarpResult(sample_bilinear(src, u, v) * mask, mask)


def _splat(src: torch.Tensor, flow: FlowField, out_h: int, out_w: int):
    # With r0 = floor(v), rows r0 and r0 + 1 always satisfy |r - v| <= 1 and
    # r0 + 2 never does; r0 - 1 does only when v is an integer. So every source
    # reaches its 2x2 floor cell, and the few sources passing the r0 - 1 (or
    # c0 - 1) test are handled separately with the full test.
    B, C, H, W = src.shape
    n_out = B * out_h * out_w
    valid = flow.valid.reshape(-1)
    u = torch.where(valid, flow.u.reshape(-1), 0.0)
    v = torch.where(valid, flow.v.reshape(-1), 0.0)
    fu = torch.floor(u).detach()
    fv = torch.floor(v).detach()
    base = torch.arange(B).repeat_interleave(H * W) * (out_h * out_w)
    vals = src.permute(0, 2, 3, 1).reshape(-1, C)
    idx_parts, w_parts, src_parts = [], [], []

    def add(rows, cols, dv, du, ok, sel):
        w = torch.where(ok, torch.exp(-(dv * dv + du * du) / 2.0), 0.0)
        flat = rows.long().clamp(0, out_h - 1) * out_w + cols.long().clamp(0, out_w - 1)
        idx_parts.append(torch.where(ok, base[sel] + flat, 0))
        w_parts.append(w)
        src_parts.append(sel)

    every = torch.arange(valid.numel())
    for oy in (0, 1):
        r = fv + oy
        row_ok = valid & (r >= 0) & (r < out_h)
        for ox in (0, 1):
            c = fu + ox
            add(r, c, r - v, c - u, row_ok & (c >= 0) & (c < out_w), every)

    extra = (valid & ((((fv - 1.0) - v).abs() <= 1.0) | (((fu - 1.0) - u).abs() <= 1.0))).nonzero().squeeze(1)
    if extra.numel():
        ue, ve, fue, fve, ok_e = u[extra], v[extra], fu[extra], fv[extra], valid[extra]
        for oy in SPLAT_OFFSETS:
            for ox in SPLAT_OFFSETS:
                if oy >= 0 and ox >= 0:
                    continue
                r = fve + oy
                c = fue + ox
                dv = r - ve
                du = c - ue
                ok = ok_e & (dv.abs() <= 1.0) & (du.abs() <= 1.0) & (r >= 0) & (r < out_h) & (c >= 0) & (c < out_w)
                add(r, c, dv, du, ok, extra)
    idx = torch.cat(idx_parts)
    w = torch.cat(w_parts)
    gathered = vals[torch.cat(src_parts)]
    den = src.new_zeros(n_out).index_add(0, idx, w)
    num = src.new_zeros(n_out, C).index_add(0, idx, w[:, None] * gathered)
    return idx, w, den, num


def forward_warp(src: torch.Tensor, flow: FlowField, out_h: int, out_w: int,
                 debug: bool = False):
    """Scatter every source pixel to the target pixels around its landing point.

    A source pixel landing at ``(v', u')`` reaches target ``(i, j)`` when both
    ``|i - v'| <= 1`` and ``|j - u'| <= 1``, with weight
    ``exp(-((i - v')^2 + (j - u')^2) / 2)``. Each target value is the
    weight-normalized sum over everything that reached it. Targets nothing
    reached get value 0 and mask 0. Invalid flow entries contribute nothing.

    With ``debug=True`` a :class:`SplatDebug` is returned alongside the result.
    """
    if src.dim() != 4:
        raise ContractError(f"src must be (B, C, H, W), got {tuple(src.shape)}")
    _check_flow(flow, src.shape[0])
    if flow.u.shape[-2:] != src.shape[-2:]:
        raise ContractError("forward_warp needs one flow entry per source pixel")
    B, C = src.shape[:2]
    idx, w, den, num = _splat(src, flow, out_h, out_w)
    hit = den > 0
    safe = torch.where(hit, den, torch.ones_like(den))
    image = (num / safe[:, None]) * hit[:, None].to(src.dtype)
    image = image.reshape(B, out_h, out_w, C).permute(0, 3, 1, 2)
    mask = hit.to(src.dtype).reshape(B, 1, out_h, out_w)
    result = WarpResult(image, mask)
    if not debug:
        return result
    with torch.no_grad():
        norm = src.new_zeros(den.shape).index_add(0, idx, w / safe[idx])
        count = src.new_zeros(den.shape).index_add(0, idx, (w > 0).to(src.dtype))
    shape = (B, 1, out_h, out_w)
    return result, SplatDebug(den.detach().reshape(shape), norm.reshape(shape), count.reshape(shape))


def occlusion_min_select(err_a: torch.Tensor, err_b: torch.Tensor) -> torch.Tensor:
    """Elementwise minimum; ties resolve to ``err_a`` (so its gradient is the one kept)."""
    if err_a.shape != err_b.shape:
        raise ContractError(f"error maps differ in shape: {tuple(err_a.shape)} vs {tuple(err_b.shape)}")
    return torch.where(err_a <= err_b, err_a, err_b)
