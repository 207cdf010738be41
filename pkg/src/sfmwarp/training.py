"""The optimization loop: loss and gradient, Nadam step, EMA, loss log and checkpoints."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .augment import AugmentConfig, apply_record, augment_camera, draw_record
from .errors import NumericError
from .geometry import CameraModel
from .objective import ObjectiveConfig, SceneParams, snippet_gradient
from .optimizer import NadamConfig, OptimizerState, ema_update, nadam_step, save_checkpoint

log = logging.getLogger(__name__)

LOSS_CSV_SCHEMA = 1
LOSS_COLUMNS = ("iteration", "total", "photometric_inverse", "photometric_forward", "smooth", "sparse",
                "grad_norm_depth", "grad_norm_pose", "grad_norm_motion")

# mirroring the image left-right: x -> -x in camera coordinates
_POSE_MIRROR = np.array([1.0, -1.0, -1.0, -1.0, 1.0, 1.0])


def mirror_params(d: dict) -> dict:
    """Raw parameters seen through a horizontally flipped camera (an involution).

    Grids are reversed along x; the pose conjugated by ``diag(-1, 1, 1)`` keeps
    the x rotation component and flips the others, and negates the x
    translation. Per-pixel relative translations are component-wise factors, so
    only their layout changes.
    """
    out = {}
    for k, a in d.items():
        if k == "pose_raw":
            out[k] = a * _POSE_MIRROR
        else:
            out[k] = a[..., ::-1].copy()
    return out


@dataclass
class RunResult:
    params: SceneParams
    ema: SceneParams
    rows: list = field(default_factory=list)
    augment_records: list = field(default_factory=list)

    @property
    def initial_total(self) -> float:
        return self.rows[0]["total"]

    @property
    def final_total(self) -> float:
        return self.rows[-1]["total"]


def _row(it: int, loss) -> dict:
    norms = loss.gradient_norms()
    row = {"iteration": it, **loss.terms(), "total": loss.total}
    row.update(grad_norm_depth=norms["depth"], grad_norm_pose=norms["pose"], grad_norm_motion=norms["motion"])
    return row


def optimize(frames, cam: CameraModel, params: SceneParams, obj_cfg: ObjectiveConfig = ObjectiveConfig(),
             opt_cfg: NadamConfig = NadamConfig(), iterations: int = 2000,
             augment: AugmentConfig | None = None, seed: int = 0,
             checkpoint_path=None, checkpoint_every: int = 5100,
             callback: Callable | None = None) -> RunResult:
    """Run ``iterations`` Nadam steps from ``params``.

    Row ``k`` of the log holds the loss at the parameters after ``k`` steps, so
    there are ``iterations + 1`` rows. The EMA shadow starts at the initial
    parameters.
    """
    if iterations < 0:
        raise ValueError("iterations must be >= 0")
    rng = np.random.default_rng(seed)
    p = params.to_dict()
    if not obj_cfg.motion:
        p.pop("motion_raw", None)
    state = ema_update(OptimizerState.fresh(p), p, opt_cfg)
    rows, records = [], []

    def evaluate(p_now: dict, it: int):
        f, c, flip = frames, cam, False
        if augment is not None:
            rec = draw_record(augment, rng, np.asarray(frames[0]).shape[-1] if np.ndim(frames[0]) == 3 else 1)
            records.append(rec.to_dict())
            f, c, flip = apply_record(frames, rec), augment_camera(cam, rec), rec.flipped
        view = mirror_params(p_now) if flip else p_now
        try:
            loss = snippet_gradient(f, SceneParams.from_dict(view), c, obj_cfg)
        except NumericError as exc:
            raise NumericError(f"iteration {it}: {exc}", iteration=it, block=exc.block) from None
        grads = mirror_params(loss.gradients) if flip else loss.gradients
        loss.gradients = grads
        return loss

    for it in range(iterations + 1):
        loss = evaluate(p, it)
        row = _row(it, loss)
        rows.append(row)
        if callback is not None:
            callback(it, row, p)
        if it == iterations:
            break
        p, state = nadam_step(p, loss.gradients, state, opt_cfg, iteration=it)
        state = ema_update(state, p, opt_cfg)
        if checkpoint_path is not None and checkpoint_every and (it + 1) % checkpoint_every == 0:
            save_checkpoint(checkpoint_path, p, state, {"iteration": it + 1})
            log.info("checkpoint at iteration %d", it + 1)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, p, state, {"iteration": iterations})

    def restore(d: dict) -> SceneParams:
        d = dict(d)
        d.setdefault("motion_raw", params.motion_raw)
        return SceneParams.from_dict(d)

    return RunResult(restore(p), restore(state.ema_params), rows, records)


def write_loss_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in rows:
            w.writerow([r["iteration"]] + [repr(float(r[c])) for c in LOSS_COLUMNS[1:]])


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if tuple(rd.fieldnames or ()) != LOSS_COLUMNS:
            raise ValueError(f"unexpected loss CSV columns {rd.fieldnames}")
        return [{k: (int(v) if k == "iteration" else float(v)) for k, v in r.items()} for r in rd]
