"""Ray-cast ground-truth snippets of textured fronto-parallel rectangles.

World coordinates coincide with a canonical camera at the origin looking down
+Z. A rectangle lies in the plane ``Z = depth``. Its ``bounds``
``[x0, y0, x1, y1]`` are normalized image coordinates of the canonical camera
(0 is the left/top image edge, 1 the right/bottom edge), which fixes its world
extent at that depth. ``bounds: full`` makes an infinite background plane;
at least one is required.

``camera_path`` lists one camera-to-world pose per frame ``(t-1, t, t+1)``.
Movers are rectangles that additionally shift by ``(f - 1) * velocity`` at
frame ``f``, so they sit at their nominal place in the reference frame.

Textures are functions of the point on the rectangle (world units relative to
the rectangle origin), so they are resolution independent and move with movers.
This module does not use the warp code; it only casts rays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import SceneSpecError
from .geometry import CameraModel, PoseParams, pose_to_transform, transform_to_pose

TEXTURE_KINDS = ("noise", "grating", "mix")
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass(frozen=True)
class Texture:
    kind: str = "mix"
    seed: int = 0
    scale: float = 0.25  # world units per noise cell / grating period scale
    contrast: float = 0.35

    def __post_init__(self):
        if self.kind not in TEXTURE_KINDS:
            raise SceneSpecError(f"unknown texture kind {self.kind!r}; expected one of {TEXTURE_KINDS}")
        if self.scale <= 0 or self.contrast <= 0:
            raise SceneSpecError("texture scale and contrast must be positive")


@dataclass(frozen=True)
class Rect:
    depth: float
    bounds: tuple | None  # (x0, y0, x1, y1) normalized, None for an infinite plane
    texture: Texture = field(default_factory=Texture)
    velocity: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not np.isfinite(self.depth) or self.depth <= 0:
            raise SceneSpecError(f"rectangle depth must be positive, got {self.depth}")
        if self.bounds is not None:
            x0, y0, x1, y1 = self.bounds
            if not (x0 < x1 and y0 < y1):
                raise SceneSpecError(f"rectangle bounds must satisfy x0 < x1 and y0 < y1, got {self.bounds}")


@dataclass(frozen=True)
class SceneSpec:
    planes: tuple
    camera_path: tuple = (PoseParams(), PoseParams(), PoseParams())
    movers: tuple = ()
    seed: int = 0
    camera: CameraModel | None = None

    def __post_init__(self):
        if not any(p.bounds is None for p in self.planes):
            raise SceneSpecError("a background plane (bounds: full) is mandatory")
        if len(self.camera_path) != 3:
            raise SceneSpecError(f"camera_path needs one pose per frame (3), got {len(self.camera_path)}")
        for m in self.movers:
            if m.bounds is None:
                raise SceneSpecError("movers must have finite bounds")

    @property
    def is_static(self) -> bool:
        return not any(any(v != 0.0 for v in m.velocity) for m in self.movers)


@dataclass
class SnippetTruth:
    frames: list  # three (H, W, 3) grids: t-1, t, t+1
    depth_t: np.ndarray  # (H, W, 1)
    poses: np.ndarray  # (2, 4, 4): t -> t-1, t -> t+1 (camera-t to camera-neighbour)
    motion_t: np.ndarray  # (2, H, W, 3) relative translation per neighbour
    mover_mask: np.ndarray  # (H, W) bool, mover footprint in frame t
    camera: CameraModel

    @property
    def pose_vectors(self) -> np.ndarray:
        out = []
        for T in self.poses:
            p = transform_to_pose(T)
            out.append(list(p.rotation) + list(p.translation))
        return np.array(out)


# ---------------------------------------------------------------- textures

def _hash(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic uniform [0, 1) values on the integer lattice (splitmix64 finalizer)."""
    with np.errstate(over="ignore"):
        x = (ix.astype(np.int64).astype(np.uint64) * np.uint64(0x9E3779B97F4A7C15)
             ^ iy.astype(np.int64).astype(np.uint64) * np.uint64(0xC2B2AE3D27D4EB4F)
             ^ np.uint64(seed & 0xFFFFFFFF) * np.uint64(0x165667B19E3779F9)) & _MASK64
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        x = x ^ (x >> np.uint64(31))
    return (x >> np.uint64(11)).astype(np.float64) / float(1 << 53)


def _fade(t):
    return t * t * t * (t * (t * 6.0 - 15.0) + 10.0)


def value_noise(x: np.ndarray, y: np.ndarray, seed: int) -> np.ndarray:
    """C2-smooth lattice noise in ``[0, 1]`` with unit cell size."""
    fx = np.floor(x)
    fy = np.floor(y)
    tx = _fade(x - fx)
    ty = _fade(y - fy)
    a = _hash(fx, fy, seed)
    b = _hash(fx + 1, fy, seed)
    c = _hash(fx, fy + 1, seed)
    d = _hash(fx + 1, fy + 1, seed)
    return (a * (1 - tx) + b * tx) * (1 - ty) + (c * (1 - tx) + d * tx) * ty


def sample_texture(tex: Texture, X: np.ndarray, Y: np.ndarray, seed: int = 0) -> np.ndarray:
    """RGB values in ``[0, 1]`` at plane coordinates ``(X, Y)``; result ``X.shape + (3,)``."""
    base = (int(seed) * 1000003 + tex.seed * 7919) & 0x7FFFFFFF
    u = X / tex.scale
    v = Y / tex.scale
    out = []
    for ch in range(3):
        s = base + 104729 * (ch + 1)
        phase = _hash(np.array([ch]), np.array([7]), s)[0] * 2 * np.pi
        parts = []
        if tex.kind in ("noise", "mix"):
            n = 0.65 * value_noise(u, v, s) + 0.35 * value_noise(2.0 * u + 17.0, 2.0 * v - 5.0, s + 1)
            parts.append(2.0 * n - 1.0)
        if tex.kind in ("grating", "mix"):
            g = 0.5 * np.sin(2.1 * u + 1.3 * v + phase) + 0.5 * np.sin(-0.9 * u + 2.4 * v + 2 * phase)
            parts.append(g)
        val = sum(parts) / len(parts)
        out.append(np.clip(0.5 + tex.contrast * val, 0.0, 1.0))
    return np.stack(out, axis=-1)


# ---------------------------------------------------------------- ray casting

def _world_extent(rect: Rect, cam: CameraModel):
    x0, y0, x1, y1 = rect.bounds
    cols = np.array([x0, x1]) * cam.width - 0.5
    rows = np.array([y0, y1]) * cam.height - 0.5
    X = (cols - cam.cx) / cam.fx * rect.depth
    Y = (rows - cam.cy) / cam.fy * rect.depth
    return X[0], X[1], Y[0], Y[1]


def _cast(spec: SceneSpec, cam: CameraModel, frame: int):
    """Colour, camera depth and surface id for every pixel of ``frame``."""
    T = pose_to_transform(spec.camera_path[frame]).numpy()
    R, o = T[:3, :3], T[:3, 3]
    rows, cols = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    d_cam = np.stack([(cols - cam.cx) / cam.fx, (rows - cam.cy) / cam.fy, np.ones_like(cols)], -1)
    d_world = d_cam @ R.T
    best = np.full(cols.shape, np.inf)
    ident = np.full(cols.shape, -1)
    hit_xy = np.zeros(cols.shape + (2,))
    surfaces = [(r, np.zeros(3)) for r in spec.planes]
    surfaces += [(m, (frame - 1) * np.asarray(m.velocity, dtype=np.float64)) for m in spec.movers]
    for k, (rect, shift) in enumerate(surfaces):
        Z = rect.depth + shift[2]
        with np.errstate(divide="ignore", invalid="ignore"):
            s = (Z - o[2]) / d_world[..., 2]
        P = o + s[..., None] * d_world
        ok = np.isfinite(s) & (s > 0)
        X = P[..., 0] - shift[0]
        Y = P[..., 1] - shift[1]
        if rect.bounds is not None:
            X0, X1, Y0, Y1 = _world_extent(rect, cam)
            ok &= (X >= X0) & (X <= X1) & (Y >= Y0) & (Y <= Y1)
        closer = ok & (s < best)
        best = np.where(closer, s, best)
        ident = np.where(closer, k, ident)
        hit_xy[closer] = np.stack([X, Y], -1)[closer]
    if (ident < 0).any():
        n = int((ident < 0).sum())
        raise SceneSpecError(f"{n} rays of frame {frame} miss all geometry; the background must be in front of the camera")
    color = np.zeros(cols.shape + (3,))
    for k, (rect, _) in enumerate(surfaces):
        sel = ident == k
        if sel.any():
            color[sel] = sample_texture(rect.texture, hit_xy[sel][:, 0], hit_xy[sel][:, 1], spec.seed + k)
    # the camera ray has unit z, so the ray parameter is the camera depth
    return color, best, ident


def render_snippet(spec: SceneSpec, cam: CameraModel | None = None) -> SnippetTruth:
    cam = cam or spec.camera
    if cam is None:
        raise SceneSpecError("no camera given and the scene spec carries none")
    frames, depth_t, ident_t = [], None, None
    for f in range(3):
        color, depth, ident = _cast(spec, cam, f)
        frames.append(color)
        if f == 1:
            depth_t, ident_t = depth, ident
    P = [pose_to_transform(p).numpy() for p in spec.camera_path]
    poses = np.stack([np.linalg.inv(P[0]) @ P[1], np.linalg.inv(P[2]) @ P[1]])

    n_static = len(spec.planes)
    mover_mask = ident_t >= n_static
    motion = np.zeros((2, cam.height, cam.width, 3))
    rows, cols = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    x_cam = np.stack([(cols - cam.cx) / cam.fx * depth_t, (rows - cam.cy) / cam.fy * depth_t, depth_t], -1)
    R_t = P[1][:3, :3]
    for m_idx, mover in enumerate(spec.movers):
        sel = ident_t == n_static + m_idx
        v_cam = R_t.T @ np.asarray(mover.velocity, dtype=np.float64)
        for k, step in enumerate((-1.0, 1.0)):
            delta = step * v_cam
            with np.errstate(divide="ignore", invalid="ignore"):
                t = np.where(delta == 0.0, 0.0, delta / x_cam[sel])
            motion[k][sel] = t
    return SnippetTruth(frames, depth_t[..., None], poses, motion, mover_mask, cam)


# ---------------------------------------------------------------- config files

def _texture_from(d) -> Texture:
    d = d or {}
    return Texture(kind=str(d.get("kind", "mix")), seed=int(d.get("seed", 0)),
                   scale=float(d.get("scale", 0.25)), contrast=float(d.get("contrast", 0.35)))


def _rect_from(d, mover: bool = False) -> Rect:
    if "depth" not in d:
        raise SceneSpecError("every rectangle needs a depth")
    b = d.get("bounds", "full")
    bounds = None if b in ("full", None) else tuple(float(x) for x in b)
    if bounds is not None and len(bounds) != 4:
        raise SceneSpecError(f"bounds must be [x0, y0, x1, y1] or 'full', got {b!r}")
    vel = tuple(float(x) for x in d.get("velocity", (0.0, 0.0, 0.0))) if mover else (0.0, 0.0, 0.0)
    return Rect(float(d["depth"]), bounds, _texture_from(d.get("texture")), vel)


def spec_from_dict(d: dict) -> SceneSpec:
    if not isinstance(d, dict) or "planes" not in d:
        raise SceneSpecError("scene spec needs a 'planes' list")
    path = d.get("camera_path")
    poses = (PoseParams(), PoseParams(), PoseParams()) if path is None else tuple(
        PoseParams(tuple(p.get("rotation", (0, 0, 0))), tuple(p.get("translation", (0, 0, 0)))) for p in path)
    cam = CameraModel.from_dict(d["camera"]) if "camera" in d else None
    return SceneSpec(tuple(_rect_from(p) for p in d["planes"]), poses,
                     tuple(_rect_from(m, mover=True) for m in d.get("movers", []) or []),
                     int(d.get("seed", 0)), cam)


def spec_to_dict(spec: SceneSpec) -> dict:
    def rect(r: Rect, mover=False):
        out = {"depth": r.depth, "bounds": "full" if r.bounds is None else list(r.bounds),
               "texture": {"kind": r.texture.kind, "seed": r.texture.seed, "scale": r.texture.scale,
                           "contrast": r.texture.contrast}}
        if mover:
            out["velocity"] = list(r.velocity)
        return out

    d = {"seed": spec.seed, "planes": [rect(p) for p in spec.planes],
         "camera_path": [{"rotation": list(p.rotation), "translation": list(p.translation)} for p in spec.camera_path],
         "movers": [rect(m, True) for m in spec.movers]}
    if spec.camera is not None:
        d["camera"] = spec.camera.to_dict()
    return d


def load_spec(path) -> SceneSpec:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise SceneSpecError(f"cannot parse scene spec {path}: {exc}") from None
    return spec_from_dict(data)


def save_spec(spec: SceneSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(spec_to_dict(spec), sort_keys=False))


# ---------------------------------------------------------------- presets

def _texture_scale(cam: CameraModel, depth: float, cell_px: float) -> float:
    # world size of ``cell_px`` pixels at this depth, so texture detail is resolved
    return cell_px * depth / cam.fx


def translating_pair_scene(cam: CameraModel, baseline: float, near: float = 2.0, far: float = 4.0,
                           bounds=(0.3, 0.25, 0.7, 0.75), cell_px: float = 6.0, seed: int = 0) -> SceneSpec:
    """Background plus one nearer rectangle, camera sliding along +x by ``baseline`` per frame."""
    path = tuple(PoseParams((0, 0, 0), (k * baseline, 0.0, 0.0)) for k in (-1, 0, 1))
    planes = (Rect(far, None, Texture("mix", 1, _texture_scale(cam, far, cell_px))),
              Rect(near, tuple(bounds), Texture("mix", 2, _texture_scale(cam, near, cell_px))))
    return SceneSpec(planes, path, (), seed, cam)


def mover_scene(cam: CameraModel, baseline: float, velocity=(0.0, 0.08, 0.0), depth: float = 3.0,
                bounds=(0.55, 0.55, 0.85, 0.9), far: float = 5.0, cell_px: float = 6.0,
                seed: int = 0) -> SceneSpec:
    """Translating camera over a background with one independently moving rectangle."""
    path = tuple(PoseParams((0, 0, 0), (k * baseline, 0.0, 0.0)) for k in (-1, 0, 1))
    planes = (Rect(far, None, Texture("mix", 1, _texture_scale(cam, far, cell_px))),)
    movers = (Rect(depth, tuple(bounds), Texture("mix", 3, _texture_scale(cam, depth, cell_px)), tuple(velocity)),)
    return SceneSpec(planes, path, movers, seed, cam)


def export_bundle(truth: SnippetTruth, outdir, spec: SceneSpec | None = None) -> list[Path]:
    """Write frames (PNG and PFM), depth, motion and mover mask plus ``truth.yaml``."""
    from .imageio import write_image

    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, img in zip(("frame_prev", "frame_t", "frame_next"), truth.frames):
        for ext in (".png", ".pfm"):
            write_image(img, out / f"{name}{ext}")
            written.append(out / f"{name}{ext}")
    write_image(truth.depth_t, out / "depth_t.pfm")
    for k, name in enumerate(("motion_prev", "motion_next")):
        write_image(np.nan_to_num(truth.motion_t[k]), out / f"{name}.pfm")
    write_image(truth.mover_mask.astype(np.float64), out / "mover_mask.png")
    written += [out / "depth_t.pfm", out / "motion_prev.pfm", out / "motion_next.pfm", out / "mover_mask.png"]
    meta = {"camera": truth.camera.to_dict(), "poses": truth.poses.tolist(),
            "pose_vectors": truth.pose_vectors.tolist()}
    if spec is not None:
        meta["scene"] = spec_to_dict(spec)
    (out / "truth.yaml").write_text(yaml.safe_dump(meta, sort_keys=False))
    written.append(out / "truth.yaml")
    return written
