"""Central finite-difference gradients of the snippet loss.

Only forward evaluations are used. Perturbed parameter sets are evaluated as
one batch. The loss is a sum of per-pixel contributions divided by fixed
counts, so the ``+h`` and ``-h`` evaluations are differenced pixel by pixel
before reduction. Mathematically this is the same central difference, but
contributions the perturbation does not touch cancel exactly, so tiny partial
derivatives are not swamped by roundoff of the whole loss.

The loss is piecewise smooth. Bilinear cell boundaries, the splat
neighbourhood cut-off, view-boundary masks, the min selection and the kinks of
``|.|`` all create kinks or jumps. For each coordinate we record those discrete
decisions at ``theta + h`` and ``theta - h``. When they differ, the stencil
straddles a non-smooth point and the coordinate is reported as ``straddled``
rather than compared.

A ``reference`` evaluator can replace the float64 differencing. It receives
the frames ``(3, C, H, W)`` and the perturbed raw parameters as numpy arrays
with a leading batch axis and returns one total per batch item, possibly in
higher precision. The discrete-state signature still comes from this module.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .geometry import CameraModel
from .imagecore import DTYPE
from .objective import ObjectiveConfig, SceneParams, disp_from_raw, evaluate_terms, prepare_frames


@dataclass
class FDResult:
    gradients: dict  # name -> array shaped like the parameter
    straddled: dict  # name -> bool array, True where the stencil crosses a branch


def _flatten(params: SceneParams, cfg: ObjectiveConfig):
    d = params.to_dict()
    if not cfg.motion:
        d.pop("motion_raw", None)
    names = list(d)
    shapes = [d[n].shape for n in names]
    theta = np.concatenate([d[n].ravel() for n in names])
    return names, shapes, theta


def _unflatten_batch(thetas: np.ndarray, names, shapes):
    out, pos = {}, 0
    B = thetas.shape[0]
    for n, shp in zip(names, shapes):
        size = int(np.prod(shp))
        out[n] = torch.from_numpy(thetas[:, pos:pos + size].reshape(B, *shp)).to(DTYPE)
        pos += size
    return out


def _signature(aux, cfg: ObjectiveConfig, frames: torch.Tensor) -> torch.Tensor:
    """Concatenated discrete state for every batch item, shape ``(B, N)``."""
    cur = frames[1]
    nbs = (frames[0], frames[2])
    parts = []

    def signs(x):
        return torch.sign(x).flatten(1)

    for rec in aux:
        B = rec["disp"].shape[0]
        for k, flow in enumerate(rec["flows"]):
            parts += [torch.floor(flow.u).flatten(1), torch.floor(flow.v).flatten(1), flow.valid.flatten(1).to(DTYPE)]
            parts.append(signs(cur.expand_as(rec["inverse"][k].image) - rec["inverse"][k].image))
        for k, (splat, _) in enumerate(rec["forward"]):
            parts.append(signs(nbs[k].expand_as(splat.image) - splat.image))
        if cfg.variant == "min":
            parts.append(signs(rec["err_next"] - rec["err_prev"]))
        grids = [rec["disp"]]
        if "motion" in rec:
            grids += [rec["motion"][:, 0], rec["motion"][:, 1]]
            parts.append(signs(rec["motion"].reshape(B, -1)))
        for g in grids:
            dx = g[..., :, 1:] - g[..., :, :-1]
            dy = g[..., 1:, :] - g[..., :-1, :]
            for d in (dx, dy, dx[..., :, 1:] - dx[..., :, :-1], dy[..., 1:, :] - dy[..., :-1, :],
                      dx[..., 1:, :] - dx[..., :-1, :], dy[..., :, 1:] - dy[..., :, :-1]):
                parts.append(signs(d.reshape(B, -1)))
    return torch.cat(parts, dim=1)


def _evaluate(frames, batch: dict, cam, cfg):
    n_scales = cfg.scales
    disps = [disp_from_raw(batch[f"inv_depth_raw.{s}"][:, None], cfg) for s in range(n_scales)]
    motion = batch.get("motion_raw")
    _, aux = evaluate_terms(frames, disps, batch["pose_raw"], motion, cam, cfg, keep_aux=True)
    pieces = [(m, n) for rec in aux for _, m, n in rec["pieces"]]
    return pieces, _signature(aux, cfg, frames)


def _central_difference(pieces, m: int, h: float) -> np.ndarray:
    total = torch.zeros(m, dtype=DTYPE)
    for contrib, count in pieces:
        diff = (contrib[:m] - contrib[m:]).flatten(1).sum(1)
        denom = count[:m] if isinstance(count, torch.Tensor) else count
        total = total + diff / denom
    return (total / (2.0 * h)).numpy()


def finite_difference_gradient(frames, params: SceneParams, cam: CameraModel,
                               cfg: ObjectiveConfig = ObjectiveConfig(), h: float = 1e-5,
                               chunk: int = 96, reference: Callable | None = None,
                               refine_below: float | None = None) -> FDResult:
    """Central differences for every raw parameter.

    With a ``reference`` evaluator, coordinates whose float64 difference has
    magnitude below ``refine_below`` (all of them when it is None) are
    recomputed with the reference.
    """
    ft = prepare_frames(frames)
    names, shapes, theta = _flatten(params, cfg)
    n = theta.size
    fd = np.empty(n)
    straddle = np.zeros(n, dtype=bool)

    def perturbed(idx):
        m = idx.size
        thetas = np.repeat(theta[None], 2 * m, axis=0)
        thetas[np.arange(m), idx] += h
        thetas[m + np.arange(m), idx] -= h
        return thetas

    with torch.no_grad():
        for start in range(0, n, chunk):
            idx = np.arange(start, min(start + chunk, n))
            m = idx.size
            pieces, sig = _evaluate(ft, _unflatten_batch(perturbed(idx), names, shapes), cam, cfg)
            straddle[idx] = (sig[:m] != sig[m:]).any(dim=1).numpy()
            # a count can only change when a mask flips, which the signature flags
            fd[idx] = _central_difference(pieces, m, h)
    if reference is not None:
        todo = np.arange(n) if refine_below is None else np.flatnonzero(np.abs(fd) < refine_below)
        frames_np = ft.numpy()
        for start in range(0, todo.size, chunk):
            idx = todo[start:start + chunk]
            m = idx.size
            thetas = perturbed(idx)
            batch, pos = {}, 0
            for name, shp in zip(names, shapes):
                size = int(np.prod(shp))
                batch[name] = thetas[:, pos:pos + size].reshape(-1, *shp)
                pos += size
            totals = np.asarray(reference(frames_np, batch))
            # the representable step, so theta +- h rounding does not bias the quotient
            step = thetas[np.arange(m), idx] - thetas[m + np.arange(m), idx]
            fd[idx] = np.asarray((totals[:m] - totals[m:]) / step.astype(totals.dtype), dtype=np.float64)
    grads, flags, pos = {}, {}, 0
    for name, shp in zip(names, shapes):
        size = int(np.prod(shp))
        grads[name] = fd[pos:pos + size].reshape(shp)
        flags[name] = straddle[pos:pos + size].reshape(shp)
        pos += size
    return FDResult(grads, flags)


@dataclass
class GradCheckReport:
    max_rel_error: float  # over entries with |analytic| > small
    max_abs_error_small: float  # over entries with |analytic| <= small
    checked: int
    straddled: int
    worst: tuple  # (name, flat index, analytic, fd)

    def passed(self, rtol: float = 1e-4, atol: float = 1e-7) -> bool:
        return self.max_rel_error < rtol and self.max_abs_error_small < atol


def compare_gradients(analytic: dict, fd: FDResult, small: float = 1e-8) -> GradCheckReport:
    max_rel, max_abs, checked, skipped = 0.0, 0.0, 0, 0
    worst = ("", -1, 0.0, 0.0)
    for name, g_fd in fd.gradients.items():
        a = np.asarray(analytic[name]).ravel()
        f = g_fd.ravel()
        ok = ~fd.straddled[name].ravel()
        skipped += int((~ok).sum())
        big = ok & (np.abs(a) > small)
        tiny = ok & ~big
        checked += int(ok.sum())
        if big.any():
            rel = np.abs(a[big] - f[big]) / np.abs(a[big])
            k = int(np.argmax(rel))
            if rel[k] > max_rel:
                max_rel = float(rel[k])
                flat = int(np.flatnonzero(big)[k])
                worst = (name, flat, float(a[flat]), float(f[flat]))
        if tiny.any():
            max_abs = max(max_abs, float(np.abs(a[tiny] - f[tiny]).max()))
    return GradCheckReport(max_rel, max_abs, checked, skipped, worst)
