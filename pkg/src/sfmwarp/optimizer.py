"""Nadam updates, parameter EMA and a binary checkpoint format.

Parameters, gradients and moments are dicts mapping block names to float64
numpy arrays. Every update is elementwise.

Checkpoint layout (all little-endian)::

    magic      8 bytes   b"SFMWCKPT"
    version    u32       1
    step       u64
    n_entries  u32
    then per entry:
        name_len u16, name (utf-8)
        ndim     u8,  dims (u32 each)
        data     float64 x prod(dims), C order

Entry names are ``param/<block>``, ``m/<block>``, ``v/<block>`` and
``ema/<block>``; an optional JSON blob follows as the entry ``meta`` stored
as a uint8 vector.
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ContractError, FormatError, NumericError

MAGIC = b"SFMWCKPT"
VERSION = 1


@dataclass(frozen=True)
class NadamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    ema_decay: float = 0.9997

    def __post_init__(self):
        if not (0.0 <= self.lr < np.inf) or not self.eps > 0:
            raise ContractError("lr must be finite and >= 0, eps > 0")
        for name in ("beta1", "beta2", "ema_decay"):
            if not 0.0 <= getattr(self, name) < 1.0 and not (name == "ema_decay" and self.ema_decay == 1.0):
                raise ContractError(f"{name} must lie in [0, 1)")


@dataclass
class OptimizerState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0
    ema_params: dict | None = None

    @classmethod
    def fresh(cls, params: dict) -> "OptimizerState":
        return cls({k: np.zeros_like(a, dtype=np.float64) for k, a in params.items()},
                   {k: np.zeros_like(a, dtype=np.float64) for k, a in params.items()})


def _check(params: dict, grads: dict, state: OptimizerState) -> None:
    if set(params) != set(grads):
        raise ContractError(f"gradient blocks {sorted(grads)} do not match parameters {sorted(params)}")
    for k, p in params.items():
        g = np.asarray(grads[k])
        if g.shape != np.shape(p):
            raise ContractError(f"gradient for {k!r} has shape {g.shape}, parameter has {np.shape(p)}")
        if k in state.m and state.m[k].shape != np.shape(p):
            raise ContractError(f"moment for {k!r} has shape {state.m[k].shape}, parameter has {np.shape(p)}")
    if state.step < 0:
        raise ContractError("optimizer step must be >= 0")


def nadam_step(params: dict, grads: dict, state: OptimizerState, cfg: NadamConfig = NadamConfig(),
               iteration: int | None = None) -> tuple[dict, OptimizerState]:
    """One Nadam update; returns new parameter and state objects (inputs are not modified).

    With ``t`` the step number after this update (counting from 1)::

        m = b1 m + (1 - b1) g
        v = b2 v + (1 - b2) g^2
        m_hat = b1 m / (1 - b1^(t+1)) + (1 - b1) g / (1 - b1^t)
        theta -= lr m_hat / (sqrt(v / (1 - b2^t)) + eps)
    """
    _check(params, grads, state)
    for k in sorted(grads):
        g = np.asarray(grads[k], dtype=np.float64)
        if not np.isfinite(g).all():
            bad = int(np.flatnonzero(~np.isfinite(g.ravel()))[0])
            raise NumericError(f"non-finite gradient in block {k!r} at flat index {bad}",
                               iteration=iteration, block=k)
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1_next = 1.0 - b1 ** (t + 1)
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads[k], dtype=np.float64)
        m = b1 * state.m.get(k, np.zeros_like(g)) + (1.0 - b1) * g
        v = b2 * state.v.get(k, np.zeros_like(g)) + (1.0 - b2) * g * g
        m_hat = b1 * m / c1_next + (1.0 - b1) * g / c1
        new_p[k] = np.asarray(p, dtype=np.float64) - cfg.lr * m_hat / (np.sqrt(v / c2) + cfg.eps)
        new_m[k] = m
        new_v[k] = v
    return new_p, OptimizerState(new_m, new_v, t, state.ema_params)


def ema_update(state: OptimizerState, params: dict, cfg: NadamConfig = NadamConfig()) -> OptimizerState:
    """``shadow = decay * shadow + (1 - decay) * params``; the first call copies ``params``."""
    if state.ema_params is None:
        shadow = {k: np.array(a, dtype=np.float64) for k, a in params.items()}
    else:
        d = cfg.ema_decay
        shadow = {}
        for k, a in params.items():
            if state.ema_params[k].shape != np.shape(a):
                raise ContractError(f"EMA block {k!r} has shape {state.ema_params[k].shape}, "
                                    f"parameter has {np.shape(a)}")
            shadow[k] = d * state.ema_params[k] + (1.0 - d) * np.asarray(a, dtype=np.float64)
    return OptimizerState(state.m, state.v, state.step, shadow)


# ---------------------------------------------------------------- checkpoints

def _pack_entry(name: str, arr: np.ndarray) -> bytes:
    raw = name.encode("utf-8")
    a = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", a.ndim)
    head += struct.pack(f"<{a.ndim}I", *a.shape)
    return head + a.tobytes()


def save_checkpoint(path, params: dict, state: OptimizerState, meta: dict | None = None) -> None:
    entries = []
    for prefix, blocks in (("param", params), ("m", state.m), ("v", state.v), ("ema", state.ema_params or {})):
        for k in sorted(blocks):
            entries.append((f"{prefix}/{k}", blocks[k]))
    if meta is not None:
        blob = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8).astype(np.float64)
        entries.append(("meta", blob))
    out = [MAGIC, struct.pack("<IQI", VERSION, state.step, len(entries))]
    out += [_pack_entry(n, a) for n, a in entries]
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(out))
    tmp.replace(path)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise FormatError("checkpoint is truncated", self.pos)
        vals = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError("checkpoint is truncated", self.pos)
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out


def load_checkpoint(path) -> tuple[dict, OptimizerState, dict | None]:
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)", 0)
    r = _Reader(data)
    r.pos = 8
    version, step, n = r.take("<IQI")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}", 8)
    blocks = {"param": {}, "m": {}, "v": {}, "ema": {}}
    meta = None
    for _ in range(n):
        (name_len,) = r.take("<H")
        name = r.raw(name_len).decode("utf-8")
        (ndim,) = r.take("<B")
        dims = r.take(f"<{ndim}I") if ndim else ()
        count = math.prod(dims)
        arr = np.frombuffer(r.raw(8 * count), dtype="<f8").reshape(dims).astype(np.float64)
        if name == "meta":
            meta = json.loads(arr.astype(np.uint8).tobytes().decode("utf-8"))
            continue
        prefix, _, key = name.partition("/")
        if prefix not in blocks:
            raise FormatError(f"unknown checkpoint entry {name!r}", r.pos)
        blocks[prefix][key] = arr
    if r.pos != len(data):
        raise FormatError("trailing bytes after the last checkpoint entry", r.pos)
    state = OptimizerState(blocks["m"], blocks["v"], int(step), blocks["ema"] or None)
    return blocks["param"], state, meta
