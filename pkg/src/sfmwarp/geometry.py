"""Pinhole projection under rigid motion, plus the per-pixel relative translation model.

Pixel convention: ``i`` is the row (image y), ``j`` the column (image x). A pixel
``(i, j)`` with depth ``d`` back-projects to ``K^-1 d (j, i, 1)^T``.

A pixel may also carry a relative translation ``t = (tx, ty, tz)``. Its camera
coordinate is then scaled component-wise by ``(1 + t)`` before the rigid
transform is applied.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, NamedTuple, Sequence

import numpy as np
import torch

from .errors import ContractError, InvalidDepthError
from .imagecore import DTYPE

DEPTH_EPS = 1e-12


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    height: int
    width: int

    def __post_init__(self):
        vals = (self.fx, self.fy, self.cx, self.cy)
        if not all(math.isfinite(v) for v in vals):
            raise ContractError("camera intrinsics must be finite")
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if self.height < 1 or self.width < 1:
            raise ContractError("camera image size must be positive")

    @property
    def K(self) -> torch.Tensor:
        return torch.tensor(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]], dtype=DTYPE
        )

    @property
    def K_inv(self) -> torch.Tensor:
        return torch.tensor(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ],
            dtype=DTYPE,
        )

    def flipped(self) -> "CameraModel":
        """Intrinsics after mirroring the image left-right."""
        return CameraModel(self.fx, self.fy, self.width - 1 - self.cx, self.cy, self.height, self.width)

    def to_dict(self) -> dict:
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d: Mapping) -> "CameraModel":
        try:
            return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]), cy=float(d["cy"]),
                       height=int(d["height"]), width=int(d["width"]))
        except KeyError as exc:
            raise ContractError(f"camera config is missing {exc.args[0]!r}") from None


@dataclass(frozen=True)
class PoseParams:
    """Axis-angle rotation (radians) and translation (scene units)."""

    rotation: tuple = (0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        rot = tuple(float(v) for v in self.rotation)
        trans = tuple(float(v) for v in self.translation)
        if len(rot) != 3 or len(trans) != 3:
            raise ContractError("pose rotation and translation must be 3-vectors")
        if not all(math.isfinite(v) for v in rot + trans):
            raise ContractError("pose parameters must be finite")
        if math.sqrt(sum(v * v for v in rot)) >= math.pi:
            raise ContractError("rotation angle must be below pi (principal branch)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    def as_vector(self) -> torch.Tensor:
        return torch.tensor(self.rotation + self.translation, dtype=DTYPE)

    @classmethod
    def from_vector(cls, vec: Sequence[float]) -> "PoseParams":
        v = [float(x) for x in vec]
        return cls(tuple(v[:3]), tuple(v[3:6]))


def skew(w: torch.Tensor) -> torch.Tensor:
    """Cross-product matrices for a batch of 3-vectors ``(..., 3) -> (..., 3, 3)``."""
    zero = torch.zeros_like(w[..., 0])
    wx, wy, wz = w[..., 0], w[..., 1], w[..., 2]
    return torch.stack(
        [
            torch.stack([zero, -wz, wy], dim=-1),
            torch.stack([wz, zero, -wx], dim=-1),
            torch.stack([-wy, wx, zero], dim=-1),
        ],
        dim=-2,
    )


def rodrigues(w: torch.Tensor) -> torch.Tensor:
    """Rotation matrices from axis-angle vectors, differentiable at zero."""
    theta2 = (w * w).sum(-1)
    small = theta2 < 1e-8
    safe2 = torch.where(small, torch.ones_like(theta2), theta2)
    theta = torch.sqrt(safe2)
    a_big = torch.sin(theta) / theta
    b_big = (1.0 - torch.cos(theta)) / safe2
    # series to O(theta^6): truncation error < 1e-25 below the switch
    a_small = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
    b_small = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    a = torch.where(small, a_small, a_big)[..., None, None]
    b = torch.where(small, b_small, b_big)[..., None, None]
    W = skew(w)
    eye = torch.eye(3, dtype=w.dtype, device=w.device).expand(W.shape)
    return eye + a * W + b * (W @ W)


def pose_to_transform(pose) -> torch.Tensor:
    """4x4 homogeneous transform(s) from a PoseParams or a ``(..., 6)`` tensor.

    The rotation block is the Rodrigues rotation of the axis-angle vector and the
    last column is the translation, taken as is.
    """
    if isinstance(pose, PoseParams):
        vec = pose.as_vector()
    else:
        vec = torch.as_tensor(pose, dtype=DTYPE)
        if vec.shape[-1] != 6:
            raise ContractError(f"pose vectors must have 6 entries, got shape {tuple(vec.shape)}")
        if not torch.isfinite(vec).all():
            raise ContractError("pose parameters must be finite")
    R = rodrigues(vec[..., :3])
    t = vec[..., 3:6, None]
    top = torch.cat([R, t], dim=-1)
    bottom = torch.zeros(*vec.shape[:-1], 1, 4, dtype=vec.dtype, device=vec.device)
    bottom[..., 0, 3] = 1.0
    return torch.cat([top, bottom], dim=-2)


def invert_transform(T: torch.Tensor) -> torch.Tensor:
    R = T[..., :3, :3]
    t = T[..., :3, 3:]
    Rt = R.transpose(-1, -2)
    top = torch.cat([Rt, -Rt @ t], dim=-1)
    return torch.cat([top, T[..., 3:, :]], dim=-2)


def transform_to_pose(T) -> PoseParams:
    """Inverse of :func:`pose_to_transform` (log map of the rotation block)."""
    M = np.asarray(T.detach().cpu().numpy() if isinstance(T, torch.Tensor) else T, dtype=np.float64)
    R = M[:3, :3]
    cos_t = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_t)
    v = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-7:
        w = 0.5 * v
    else:
        w = theta / (2.0 * math.sin(theta)) * v
    return PoseParams(tuple(w), tuple(M[:3, 3]))


def is_rigid(T, tol: float = 1e-10) -> bool:
    M = torch.as_tensor(T, dtype=DTYPE)
    R = M[:3, :3]
    ortho = torch.allclose(R @ R.T, torch.eye(3, dtype=DTYPE), atol=tol, rtol=0)
    det_ok = abs(float(torch.linalg.det(R)) - 1.0) <= tol
    bottom_ok = torch.equal(M[3], torch.tensor([0.0, 0.0, 0.0, 1.0], dtype=DTYPE))
    return bool(ortho and det_ok and bottom_ok)


def backproject(cam: CameraModel, i, j, d) -> torch.Tensor:
    """Camera coordinate(s) of pixel (row ``i``, col ``j``) at depth ``d``; result ``(..., 3)``."""
    i, j, d = (torch.as_tensor(v, dtype=DTYPE) for v in (i, j, d))
    if not bool((d > 0).all()):
        raise InvalidDepthError("depth must be strictly positive")
    x = (j - cam.cx) / cam.fx * d
    y = (i - cam.cy) / cam.fy * d
    return torch.stack(torch.broadcast_tensors(x, y, d), dim=-1)


def apply_object_motion(x, t) -> torch.Tensor:
    """Component-wise ``(1 + t) * x``: the relative-translation model of a moving pixel."""
    x = torch.as_tensor(x, dtype=DTYPE)
    t = torch.as_tensor(t, dtype=DTYPE)
    factor = 1.0 + t
    if not bool(torch.isfinite(factor).all()):
        raise ContractError("relative translation must be finite")
    return factor * x


class Projection(NamedTuple):
    u: torch.Tensor
    v: torch.Tensor
    z: torch.Tensor
    valid: torch.Tensor


def project(cam: CameraModel, T, x) -> Projection:
    """Project camera coordinate(s) ``x (..., 3)`` through transform ``T``.

    Returns column ``u``, row ``v`` and target depth ``z``. Points with
    ``z <= 1e-12`` are flagged invalid and get ``u = v = nan``; no exception.
    """
    x = torch.as_tensor(x, dtype=DTYPE)
    T = torch.as_tensor(T, dtype=DTYPE)
    xp = (T[..., :3, :3] @ x[..., None])[..., 0] + T[..., :3, 3]
    z = xp[..., 2]
    valid = z > DEPTH_EPS
    safe_z = torch.where(valid, z, torch.ones_like(z))
    u = (cam.fx * xp[..., 0] + cam.cx * z) / safe_z
    v = (cam.fy * xp[..., 1] + cam.cy * z) / safe_z
    nan = torch.full_like(u, float("nan"))
    return Projection(torch.where(valid, u, nan), torch.where(valid, v, nan), z, valid)


class FlowField(NamedTuple):
    """Per-source-pixel landing point in the target view, each ``(B, 1, H, W)``."""

    u: torch.Tensor
    v: torch.Tensor
    z: torch.Tensor
    valid: torch.Tensor

    @property
    def shape(self):
        return tuple(self.u.shape)


def pixel_grid(height: int, width: int):
    rows = torch.arange(height, dtype=DTYPE).view(1, 1, height, 1).expand(1, 1, height, width)
    cols = torch.arange(width, dtype=DTYPE).view(1, 1, 1, width).expand(1, 1, height, width)
    return rows, cols


def identity_flow(batch: int, height: int, width: int) -> FlowField:
    rows, cols = pixel_grid(height, width)
    u = cols.expand(batch, 1, height, width).clone()
    v = rows.expand(batch, 1, height, width).clone()
    z = torch.ones_like(u)
    return FlowField(u, v, z, torch.ones_like(u, dtype=torch.bool))


def project_grid(cam: CameraModel, T: torch.Tensor, inv_depth: torch.Tensor,
                 motion: torch.Tensor | None = None) -> FlowField:
    """Dense version of backproject -> (optional) object motion -> project.

    ``T`` is ``(4, 4)`` or ``(B, 4, 4)``, ``inv_depth`` ``(B, 1, H, W)`` and ``motion``
    ``(B, 3, H, W)``. Where the landing depth is not positive the flow is marked
    invalid and its coordinates replaced by a finite placeholder (the source pixel).
    """
    if inv_depth.dim() != 4 or inv_depth.shape[1] != 1:
        raise ContractError(f"inv_depth must be (B, 1, H, W), got {tuple(inv_depth.shape)}")
    B, _, H, W = inv_depth.shape
    if motion is not None and (motion.dim() != 4 or tuple(motion.shape) != (B, 3, H, W)):
        raise ContractError(
            f"motion field shape {tuple(motion.shape)} does not match inverse depth {(B, 3, H, W)}"
        )
    if not bool((inv_depth > 0).all()):
        raise InvalidDepthError("inverse depth must be strictly positive")
    T = T.to(DTYPE)
    if T.dim() == 2:
        T = T.expand(B, 4, 4)
    depth = 1.0 / inv_depth
    rows, cols = pixel_grid(H, W)
    x = (cols - cam.cx) / cam.fx * depth
    y = (rows - cam.cy) / cam.fy * depth
    pts = torch.cat([x, y, depth], dim=1)  # (B, 3, H, W)
    if motion is not None:
        pts = (1.0 + motion) * pts
    R = T[:, :3, :3]
    t = T[:, :3, 3]
    moved = torch.einsum("bij,bjhw->bihw", R, pts) + t[:, :, None, None]
    z = moved[:, 2:3]
    valid = z > DEPTH_EPS
    safe_z = torch.where(valid, z, torch.ones_like(z))
    u = (cam.fx * moved[:, 0:1] + cam.cx * z) / safe_z
    v = (cam.fy * moved[:, 1:2] + cam.cy * z) / safe_z
    finite = torch.isfinite(u) & torch.isfinite(v)
    valid = valid & finite
    u = torch.where(valid, u, cols.expand_as(u))
    v = torch.where(valid, v, rows.expand_as(v))
    return FlowField(u, v, z, valid)
