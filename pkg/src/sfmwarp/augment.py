"""Photometric and flip augmentation applied identically to the three frames of a snippet."""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import ContractError
from .geometry import CameraModel
from .imagecore import as_grid


@dataclass(frozen=True)
class AugmentConfig:
    global_scale_range: tuple = (5.0 / 6.0, 1.2)
    per_channel_range: tuple = (0.8, 1.2)
    contrast_range: tuple = (0.5, 1.5)
    hflip_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("global_scale_range", "per_channel_range", "contrast_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ContractError(f"{name} must satisfy 0 <= low <= high, got {(lo, hi)}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ContractError("hflip_prob must lie in [0, 1]")


@dataclass(frozen=True)
class AugmentRecord:
    global_scale: float
    channel_scales: tuple
    contrast: float
    flipped: bool

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channel_scales"] = list(self.channel_scales)
        return d


def _uniform(rng: np.random.Generator, lo: float, hi: float) -> float:
    return float(lo) if lo == hi else float(rng.uniform(lo, hi))


def draw_record(cfg: AugmentConfig, rng: np.random.Generator, channels: int = 3) -> AugmentRecord:
    g = _uniform(rng, *cfg.global_scale_range)
    cs = tuple(_uniform(rng, *cfg.per_channel_range) for _ in range(channels))
    c = _uniform(rng, *cfg.contrast_range)
    flip = bool(rng.random() < cfg.hflip_prob)
    return AugmentRecord(g, cs, c, flip)


def apply_record(frames, record: AugmentRecord) -> list[np.ndarray]:
    """Apply one drawn record to every frame.

    Contrast is anchored at the mean of the whole snippet after scaling, so the
    three frames keep identical brightness relations.
    """
    grids = [as_grid(f) for f in frames]
    if any(g.shape != grids[0].shape for g in grids):
        raise ContractError("snippet frames differ in size")
    C = grids[0].shape[2]
    if len(record.channel_scales) != C:
        raise ContractError(f"record has {len(record.channel_scales)} channel scales for {C} channels")
    scale = record.global_scale * np.asarray(record.channel_scales)
    # factors of exactly 1 are skipped so a degenerate draw is an exact identity
    scaled = [g * scale for g in grids] if (scale != 1.0).any() else grids
    if record.contrast != 1.0:
        mean = float(np.mean(scaled))
        scaled = [mean + record.contrast * (g - mean) for g in scaled]
    out = [np.clip(g, 0.0, 1.0) for g in scaled]
    if record.flipped:
        out = [g[:, ::-1].copy() for g in out]
    return out


def augment_snippet(frames, cfg: AugmentConfig = AugmentConfig(), rng: np.random.Generator | None = None):
    """One random draw applied to all three frames; returns ``(frames', record)``."""
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    C = as_grid(frames[0]).shape[2]
    record = draw_record(cfg, rng, C)
    return apply_record(frames, record), record


def augment_camera(cam: CameraModel, record: AugmentRecord) -> CameraModel:
    """Intrinsics matching the augmented frames (mirrored principal point after a flip)."""
    return cam.flipped() if record.flipped else cam
