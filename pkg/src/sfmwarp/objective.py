"""The multiscale snippet loss and its gradients.

A snippet is three frames ``(I_prev, I_t, I_next)``. The optimized quantities
(:class:`SceneParams`) are

* one raw inverse-depth grid per output scale ``s`` (size ``ceil(H/2^s) x ceil(W/2^s)``),
* two raw 6-DoF poses, ``t -> t-1`` and ``t -> t+1`` (axis-angle, translation),
* optionally two raw per-pixel translation fields at full resolution.

Raw inverse depth goes through a sigmoid onto ``[disp_min, disp_max]`` and is
then divided by its mean. Raw poses and translation fields are multiplied by
0.01 before use.

For every scale the normalized inverse depth is upsampled to full resolution
and drives both syntheses against both neighbours:

* inverse warping of each neighbour into view ``t``; the two error maps are
  merged either as ``2 * min`` (ties go to the ``t+1`` branch) or as a sum, and
  averaged over the union of their valid masks. A pixel only one neighbour
  sees keeps that neighbour's error in both variants; the minimum is taken
  only where both errors exist;
* forward splatting of ``I_t`` into each neighbour view, each error averaged
  over its own mask;
* ``0.01 / 2^s`` weighted smoothness of the normalized inverse depth, and
  smoothness plus L1 sparseness of the translation fields box-downsampled to
  that scale.

Gradients are exact derivatives obtained with torch autograd in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .errors import ContractError, NumericError
from .geometry import CameraModel, pose_to_transform, project_grid
from .imagecore import DTYPE, downsample2x, level_shape, to_tensor, upsample_bilinear
from .photometric import PhotometricConfig, photometric_error, reduce_error
from .regularizer import (RegConfig, normalize_inverse_depth, smoothness_loss, smoothness_pieces,
                          sparseness_loss)
from .warp import forward_warp, inverse_warp, occlusion_min_select

TERMS = ("photometric_inverse", "photometric_forward", "smooth", "sparse")
PREV, NEXT = 0, 1


@dataclass(frozen=True)
class ObjectiveConfig:
    variant: str = "min"
    scales: int = 3
    motion: bool = True
    forward_terms: bool = True
    disp_min: float = 0.01
    disp_max: float = 10.0
    pose_scale: float = 0.01
    motion_scale: float = 0.01
    photo: PhotometricConfig = field(default_factory=PhotometricConfig)
    reg: RegConfig = field(default_factory=RegConfig)

    def __post_init__(self):
        if self.variant not in ("min", "avg"):
            raise ContractError(f"variant must be 'min' or 'avg', got {self.variant!r}")
        if self.scales < 1:
            raise ContractError("at least one scale is required")
        if not 0 < self.disp_min < self.disp_max:
            raise ContractError("need 0 < disp_min < disp_max")


@dataclass
class SceneParams:
    inv_depth_raw: list  # per scale, (h_s, w_s) arrays
    pose_raw: np.ndarray  # (2, 6): t->t-1, t->t+1
    motion_raw: np.ndarray | None = None  # (2, 3, H, W)

    @classmethod
    def initial(cls, height: int, width: int, scales: int, motion: bool = True) -> "SceneParams":
        """Constant depth, identity poses, no motion."""
        depth = [np.zeros(level_shape(height, width, s)) for s in range(scales)]
        mot = np.zeros((2, 3, height, width)) if motion else None
        return cls(depth, np.zeros((2, 6)), mot)

    def to_dict(self) -> dict[str, np.ndarray]:
        out = {f"inv_depth_raw.{s}": np.asarray(a, dtype=np.float64) for s, a in enumerate(self.inv_depth_raw)}
        out["pose_raw"] = np.asarray(self.pose_raw, dtype=np.float64)
        if self.motion_raw is not None:
            out["motion_raw"] = np.asarray(self.motion_raw, dtype=np.float64)
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "SceneParams":
        n = sum(1 for k in d if k.startswith("inv_depth_raw."))
        depth = [np.asarray(d[f"inv_depth_raw.{s}"], dtype=np.float64) for s in range(n)]
        return cls(depth, np.asarray(d["pose_raw"], dtype=np.float64),
                   None if d.get("motion_raw") is None else np.asarray(d["motion_raw"], dtype=np.float64))

    def copy(self) -> "SceneParams":
        return SceneParams.from_dict({k: v.copy() for k, v in self.to_dict().items()})


@dataclass
class SnippetLoss:
    total: float
    photometric_inverse: float
    photometric_forward: float
    smooth: float
    sparse: float
    gradients: dict | None = None

    def terms(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in TERMS}

    def gradient_norms(self) -> dict[str, float]:
        g = self.gradients or {}
        depth = [v for k, v in g.items() if k.startswith("inv_depth_raw.")]
        out = {"depth": float(np.sqrt(sum(float((a * a).sum()) for a in depth)))}
        out["pose"] = float(np.linalg.norm(g["pose_raw"])) if "pose_raw" in g else 0.0
        out["motion"] = float(np.linalg.norm(g["motion_raw"])) if "motion_raw" in g else 0.0
        return out


def prepare_frames(frames: Sequence) -> torch.Tensor:
    """Three frames (ImageGrids or tensors) -> ``(3, C, H, W)`` float64 tensor."""
    if len(frames) != 3:
        raise ContractError(f"a snippet has exactly three frames, got {len(frames)}")
    ts = [to_tensor(f)[0] for f in frames]
    if not all(t.shape == ts[0].shape for t in ts):
        raise ContractError("snippet frames differ in size: " + ", ".join(str(tuple(t.shape)) for t in ts))
    return torch.stack(ts)


def disp_from_raw(raw: torch.Tensor, cfg: ObjectiveConfig) -> torch.Tensor:
    """Sigmoid of the raw grid mapped affinely onto ``[disp_min, disp_max]`` (before normalization)."""
    return cfg.disp_min + (cfg.disp_max - cfg.disp_min) * torch.sigmoid(raw)


def raw_to_depth(inv_depth_raw, cfg: ObjectiveConfig = ObjectiveConfig()):
    """Normalized inverse depth and depth for one raw grid ``(h, w)`` or ``(B, 1, h, w)``."""
    raw = torch.as_tensor(inv_depth_raw, dtype=DTYPE)
    squeeze = raw.dim() == 2
    if squeeze:
        raw = raw[None, None]
    disp = normalize_inverse_depth(disp_from_raw(raw, cfg))
    depth = 1.0 / disp
    if squeeze:
        return disp[0, 0], depth[0, 0]
    return disp, depth


def check_feasible(height: int, width: int, cfg: ObjectiveConfig) -> None:
    h, w = level_shape(height, width, cfg.scales - 1)
    if h < 3 or w < 3:
        raise ContractError(
            f"{cfg.scales} scales are not feasible for {height}x{width} frames "
            f"(coarsest level would be {h}x{w}, smoothness needs 3x3)"
        )


def _motion_levels(motion: torch.Tensor, scales: int) -> list[torch.Tensor]:
    out = [motion]
    for _ in range(scales - 1):
        out.append(downsample2x(out[-1]))
    return out


def evaluate_terms(frames: torch.Tensor, disps: Sequence[torch.Tensor], pose_raw: torch.Tensor,
                   motion_raw: torch.Tensor | None, cam: CameraModel, cfg: ObjectiveConfig,
                   keep_aux: bool = False):
    """Loss terms for a batch of parameter sets.

    ``frames`` is ``(3, C, H, W)`` and shared by the batch; ``disps`` holds one
    un-normalized inverse-depth tensor ``(B, 1, h_s, w_s)`` per scale;
    ``pose_raw`` is ``(B, 2, 6)``; ``motion_raw`` is ``(B, 2, 3, H, W)`` or None.
    Returns ``(terms, aux)`` where ``terms`` maps each name in ``TERMS`` to a
    ``(B,)`` tensor and ``aux`` (when requested) holds per-scale intermediates.
    Each aux record also lists ``pieces``: ``(term, map, count)`` triples with
    ``term == sum(map) / count`` summed over pieces, for per-pixel differencing.
    """
    _, C, H, W = frames.shape
    B = pose_raw.shape[0]
    if len(disps) != cfg.scales:
        raise ContractError(f"expected {cfg.scales} inverse-depth grids, got {len(disps)}")
    check_feasible(H, W, cfg)
    prev, cur, nxt = (frames[k:k + 1] for k in range(3))
    neighbours = (prev, nxt)
    T = pose_to_transform(cfg.pose_scale * pose_raw)  # (B, 2, 4, 4)
    use_motion = cfg.motion and motion_raw is not None
    if use_motion:
        motion = cfg.motion_scale * motion_raw
        mlevels = _motion_levels(motion.reshape(B, 6, H, W), cfg.scales)

    zero = torch.zeros(B, dtype=DTYPE)
    terms = {name: zero for name in TERMS}
    aux = []
    for s, disp in enumerate(disps):
        if tuple(disp.shape[-2:]) != level_shape(H, W, s):
            raise ContractError(f"scale {s} grid is {tuple(disp.shape[-2:])}, expected {level_shape(H, W, s)}")
        d = normalize_inverse_depth(disp)
        d_full = upsample_bilinear(d, H, W)
        errs, masks = [], []
        record = {"disp": d, "flows": [], "inverse": [], "forward": [], "pieces": []}
        pieces = record["pieces"]
        for k, nb in enumerate(neighbours):
            flow = project_grid(cam, T[:, k], d_full, motion[:, k] if use_motion else None)
            synth = inverse_warp(nb.expand(B, C, H, W), flow)
            errs.append(photometric_error(cur, synth, cfg.photo))
            masks.append(synth.mask)
            if cfg.forward_terms:
                splat = forward_warp(cur.expand(B, C, H, W), flow, H, W)
                e_fw = photometric_error(nb, splat, cfg.photo)
                terms["photometric_forward"] = terms["photometric_forward"] + reduce_error(e_fw, splat.mask)
                if keep_aux:
                    record["forward"].append((splat, e_fw))
                    pieces.append(("photometric_forward", e_fw, _count(splat.mask)))
            if keep_aux:
                record["flows"].append(flow)
                record["inverse"].append(synth)
        union = torch.maximum(masks[PREV], masks[NEXT])
        # a masked error is 0, so the sum is the one available error where only one neighbour sees the pixel
        combined = errs[PREV] + errs[NEXT]
        if cfg.variant == "min":
            both = (masks[PREV] > 0) & (masks[NEXT] > 0)
            combined = torch.where(both, 2.0 * occlusion_min_select(errs[NEXT], errs[PREV]), combined)
        terms["photometric_inverse"] = terms["photometric_inverse"] + reduce_error(combined, union)

        w = cfg.reg.weight(s)
        smooth = w * smoothness_loss(d, cfg.reg.beta)
        sparse = zero
        smooth_grids = [d]
        if use_motion:
            ms = mlevels[s].reshape(B, 2, 3, *mlevels[s].shape[-2:])
            for k in (PREV, NEXT):
                smooth = smooth + w * smoothness_loss(ms[:, k], cfg.reg.beta)
                sparse = sparse + w * sparseness_loss(ms[:, k])
                smooth_grids.append(ms[:, k])
                if keep_aux:
                    pieces.append(("sparse", w * ms[:, k].abs(), ms.shape[-2] * ms.shape[-1]))
            record["motion"] = ms
        if keep_aux:
            pieces.append(("photometric_inverse", combined, _count(union)))
            for g in smooth_grids:
                pieces += [("smooth", w * m, n) for m, n in smoothness_pieces(g, cfg.reg.beta)]
        terms["smooth"] = terms["smooth"] + smooth
        terms["sparse"] = terms["sparse"] + sparse
        if keep_aux:
            record.update(err_prev=errs[PREV], err_next=errs[NEXT], combined=combined, union=union)
            aux.append(record)
    return terms, (aux if keep_aux else None)


def _count(mask: torch.Tensor) -> torch.Tensor:
    return mask.flatten(1).sum(1).clamp(min=1.0)


def _tensors(params: SceneParams, cfg: ObjectiveConfig, requires_grad: bool):
    depth = [torch.tensor(np.asarray(a), dtype=DTYPE).reshape(1, 1, *np.shape(a)).requires_grad_(requires_grad)
             for a in params.inv_depth_raw]
    pose = torch.tensor(np.asarray(params.pose_raw), dtype=DTYPE).reshape(1, 2, 6).requires_grad_(requires_grad)
    motion = None
    if cfg.motion:
        if params.motion_raw is None:
            raise ContractError("motion is enabled but SceneParams carries no motion field")
        motion = torch.tensor(np.asarray(params.motion_raw), dtype=DTYPE)[None].requires_grad_(requires_grad)
    return depth, pose, motion


def snippet_loss(frames, params: SceneParams, cam: CameraModel, cfg: ObjectiveConfig = ObjectiveConfig(),
                 with_grad: bool = False) -> SnippetLoss:
    """Total loss and its breakdown; gradients w.r.t. every raw parameter when ``with_grad``."""
    ft = prepare_frames(frames)
    if (ft.shape[-2], ft.shape[-1]) != (cam.height, cam.width):
        raise ContractError(f"frames are {tuple(ft.shape[-2:])} but the camera is {cam.height}x{cam.width}")
    depth, pose, motion = _tensors(params, cfg, with_grad)
    disps = [disp_from_raw(r, cfg) for r in depth]
    with torch.set_grad_enabled(with_grad):
        terms, _ = evaluate_terms(ft, disps, pose, motion, cam, cfg)
        parts = [terms[name][0] for name in TERMS]
        total = parts[0] + parts[1] + parts[2] + parts[3]
    if not bool(torch.isfinite(total)):
        raise NumericError(f"non-finite loss {float(total.detach())}")
    grads = None
    if with_grad:
        leaves = depth + [pose] + ([motion] if motion is not None else [])
        gs = torch.autograd.grad(total, leaves)
        grads = {f"inv_depth_raw.{s}": gs[s][0, 0].numpy() for s in range(len(depth))}
        grads["pose_raw"] = gs[len(depth)][0].numpy()
        if motion is not None:
            grads["motion_raw"] = gs[-1][0].numpy()
    return SnippetLoss(float(total.detach()), *(float(p.detach()) for p in parts), gradients=grads)


def snippet_gradient(frames, params: SceneParams, cam: CameraModel,
                     cfg: ObjectiveConfig = ObjectiveConfig()) -> SnippetLoss:
    return snippet_loss(frames, params, cam, cfg, with_grad=True)


def loss_from_disps(frames, disps: Sequence, pose_raw, motion_raw, cam: CameraModel,
                    cfg: ObjectiveConfig = ObjectiveConfig()) -> float:
    """Total loss given un-normalized inverse-depth grids instead of raw parameters."""
    ft = prepare_frames(frames)
    ds = [torch.as_tensor(np.asarray(d), dtype=DTYPE).reshape(1, 1, *np.shape(d)) for d in disps]
    pose = torch.as_tensor(np.asarray(pose_raw), dtype=DTYPE).reshape(1, 2, 6)
    mot = None if motion_raw is None else torch.as_tensor(np.asarray(motion_raw), dtype=DTYPE)[None]
    with torch.no_grad():
        terms, _ = evaluate_terms(ft, ds, pose, mot, cam, cfg)
    return float(sum(terms[name][0] for name in TERMS))


def snippet_aux(frames, params: SceneParams, cam: CameraModel, cfg: ObjectiveConfig = ObjectiveConfig()):
    """Per-scale intermediates (flows, syntheses, error maps) for inspection."""
    ft = prepare_frames(frames)
    depth, pose, motion = _tensors(params, cfg, False)
    with torch.no_grad():
        _, aux = evaluate_terms(ft, [disp_from_raw(r, cfg) for r in depth], pose, motion, cam, cfg, keep_aux=True)
    return aux


def normalized_disps(params: SceneParams, cfg: ObjectiveConfig) -> list[np.ndarray]:
    return [raw_to_depth(r, cfg)[0].numpy() for r in params.inv_depth_raw]


def without_motion(cfg: ObjectiveConfig) -> ObjectiveConfig:
    return replace(cfg, motion=False)
