"""Depth evaluation: median scaling, capping and the seven standard metrics."""
from __future__ import annotations

import csv
import io
from dataclasses import astuple, dataclass, fields
from typing import Sequence

import numpy as np
import torch

from .errors import EvaluationError
from .imagecore import DTYPE, upsample_bilinear

CSV_HEADER = ("AbsRel", "SqRel", "RMSE", "RMSELog", "δ<1.25", "δ<1.25^2", "δ<1.25^3")


@dataclass(frozen=True)
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float

    def as_row(self) -> list[float]:
        return list(astuple(self))

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


def _prepare(pred, gt, valid):
    p = np.asarray(pred, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if p.shape != g.shape:
        raise EvaluationError(f"prediction {p.shape} and ground truth {g.shape} differ in shape")
    if valid is None:
        m = np.ones(p.shape, dtype=bool)
    else:
        m = np.asarray(valid).astype(bool)
        if m.shape != p.shape:
            m = np.broadcast_to(m.reshape(m.shape + (1,) * (p.ndim - m.ndim)), p.shape)
    m = m & np.isfinite(g) & np.isfinite(p)
    if not m.any():
        raise EvaluationError("the valid set is empty")
    return p, g, m


def median_align(pred, gt, valid=None) -> np.ndarray:
    """Scale ``pred`` so that its median over ``valid`` equals that of ``gt``."""
    p, g, m = _prepare(pred, gt, valid)
    if (p[m] <= 0).any() or (g[m] <= 0).any():
        raise EvaluationError("depths must be positive on the valid set")
    return p * (np.median(g[m]) / np.median(p[m]))


def compute_metrics(pred, gt, valid=None, cap: float = 80.0, min_depth: float = 1e-3) -> DepthMetrics:
    """Metrics over ``valid`` after clamping both maps to ``[min_depth, cap]``."""
    if cap <= 0 or min_depth <= 0 or min_depth >= cap:
        raise EvaluationError("need 0 < min_depth < cap")
    p, g, m = _prepare(pred, gt, valid)
    p = np.clip(p[m], min_depth, cap)
    g = np.clip(g[m], min_depth, cap)
    diff = p - g
    ratio = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff * diff / g)),
        rmse=float(np.sqrt(np.mean(diff * diff))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25 ** 2)),
        delta3=float(np.mean(ratio < 1.25 ** 3)),
    )


def aggregate_depth_prediction(disps: Sequence, height: int | None = None, width: int | None = None) -> np.ndarray:
    """Average of per-scale depth maps, each upsampled to full resolution first.

    ``disps`` are normalized inverse-depth grids ``(h_s, w_s)``, finest first;
    the output size defaults to that of the first grid.
    """
    if len(disps) == 0:
        raise EvaluationError("no inverse-depth grids to aggregate")
    grids = [torch.as_tensor(np.asarray(d), dtype=DTYPE) for d in disps]
    H = height or grids[0].shape[-2]
    W = width or grids[0].shape[-1]
    total = torch.zeros(H, W, dtype=DTYPE)
    for g in grids:
        if (g <= 0).any():
            raise EvaluationError("inverse depth must be positive")
        total = total + 1.0 / upsample_bilinear(g.reshape(1, 1, *g.shape[-2:]), H, W)[0, 0]
    return (total / len(grids)).numpy()


def metrics_csv(rows: Sequence[DepthMetrics], labels: Sequence[str] | None = None) -> str:
    """CSV text with one row per metrics record; fixed 10-significant-digit formatting."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow((["run"] if labels is not None else []) + list(CSV_HEADER))
    for k, r in enumerate(rows):
        vals = [f"{v:.10g}" for v in r.as_row()]
        w.writerow(([labels[k]] if labels is not None else []) + vals)
    return buf.getvalue()
