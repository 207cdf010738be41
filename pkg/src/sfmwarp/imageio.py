"""Reading and writing ImageGrids.

Supported formats, detected from magic bytes on read and from the file suffix on write:

* PNG  -- 8-bit gray or RGB, values mapped to ``[0, 1]`` by ``/255``.
* PGM  -- binary ``P5``, maxval <= 255.
* PFM  -- ``Pf`` (1 channel) / ``PF`` (3 channels) float32. We always emit
  little-endian data with scale ``-1.0``; both endiannesses are read.

PFM stores rows bottom-to-top; the readers and writers hide that.
"""
from __future__ import annotations

import io
import os
import re

import numpy as np
from PIL import Image

from .errors import FormatError
from .imagecore import as_grid

_PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def quantize8(img) -> np.ndarray:
    """Round to the 8-bit lattice that PNG/PGM can store exactly."""
    return np.round(np.clip(as_grid(img), 0.0, 1.0) * 255.0) / 255.0


def read_image(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw.startswith(_PNG_MAGIC):
        return _decode_png(raw)
    if raw[:2] == b"P5":
        return _decode_pgm(raw)
    if raw[:2] in (b"PF", b"Pf"):
        return _decode_pfm(raw)
    raise FormatError(f"unrecognised magic bytes {raw[:2]!r}", 0)


def write_image(img, path) -> None:
    grid = as_grid(img)
    ext = os.path.splitext(str(path))[1].lower()
    if ext == ".pfm":
        data = _encode_pfm(grid)
    elif ext == ".png":
        data = _encode_png(grid)
    elif ext == ".pgm":
        data = _encode_pgm(grid)
    else:
        raise ValueError(f"unsupported output format {ext!r}")
    with open(path, "wb") as fh:
        fh.write(data)


def _to_bytes8(grid: np.ndarray) -> np.ndarray:
    return np.round(np.clip(grid, 0.0, 1.0) * 255.0).astype(np.uint8)


def _encode_png(grid: np.ndarray) -> bytes:
    c = grid.shape[2]
    if c not in (1, 3):
        raise ValueError(f"PNG output supports 1 or 3 channels, got {c}")
    arr = _to_bytes8(grid)
    im = Image.fromarray(arr[:, :, 0], mode="L") if c == 1 else Image.fromarray(arr, mode="RGB")
    buf = io.BytesIO()
    im.save(buf, format="PNG", optimize=False)
    return buf.getvalue()


def _decode_png(raw: bytes) -> np.ndarray:
    try:
        im = Image.open(io.BytesIO(raw))
        im.load()
    except (OSError, SyntaxError) as exc:
        raise FormatError(f"corrupt or truncated PNG: {exc}", len(raw)) from None
    if im.mode not in ("L", "RGB"):
        im = im.convert("RGB" if "A" in im.mode or im.mode in ("P", "RGBA") else "L")
    arr = np.asarray(im, dtype=np.float64) / 255.0
    return as_grid(arr)


def _parse_header(raw: bytes, n_fields: int) -> tuple[list[bytes], int]:
    """Whitespace-separated PNM-style header tokens, skipping ``#`` comments.

    Returns the tokens (magic included) and the offset of the first data byte.
    """
    tokens: list[bytes] = []
    pos = 0
    token_re = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")
    while len(tokens) < n_fields:
        m = token_re.match(raw, pos)
        if m is None:
            raise FormatError("truncated header", len(raw))
        tokens.append(m.group(1))
        pos = m.end()
    if pos >= len(raw) or raw[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise FormatError("header not terminated by a single whitespace byte", pos)
    return tokens, pos + 1


def _header_int(tok: bytes, offset: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise FormatError(f"bad header integer {tok!r}", offset) from None


def _encode_pgm(grid: np.ndarray) -> bytes:
    if grid.shape[2] != 1:
        raise ValueError("PGM output is single-channel")
    h, w = grid.shape[:2]
    return f"P5\n{w} {h}\n255\n".encode() + _to_bytes8(grid).tobytes()


def _decode_pgm(raw: bytes) -> np.ndarray:
    (magic, w, h, maxval), start = _parse_header(raw, 4)
    w, h, maxval = _header_int(w, 2), _header_int(h, 2), _header_int(maxval, 2)
    if not 0 < maxval <= 255:
        raise FormatError(f"only 8-bit PGM is supported (maxval={maxval})", start - 1)
    need = w * h
    if len(raw) - start < need:
        raise FormatError(f"truncated PGM payload: need {need} bytes", len(raw))
    arr = np.frombuffer(raw, dtype=np.uint8, count=need, offset=start).reshape(h, w)
    return as_grid(arr.astype(np.float64) / maxval)


def _encode_pfm(grid: np.ndarray) -> bytes:
    h, w, c = grid.shape
    if c not in (1, 3):
        raise ValueError(f"PFM supports 1 or 3 channels, got {c}")
    magic = "Pf" if c == 1 else "PF"
    header = f"{magic}\n{w} {h}\n-1.0\n".encode()
    body = np.ascontiguousarray(grid[::-1].astype("<f4")).tobytes()
    return header + body


def _decode_pfm(raw: bytes) -> np.ndarray:
    (magic, w, h, scale), start = _parse_header(raw, 4)
    channels = 3 if magic == b"PF" else 1
    w, h = _header_int(w, 2), _header_int(h, 2)
    try:
        scale = float(scale)
    except ValueError:
        raise FormatError(f"bad PFM scale {scale!r}", start - 1) from None
    if scale == 0.0:
        raise FormatError("PFM scale must be non-zero", start - 1)
    dtype = "<f4" if scale < 0 else ">f4"
    need = w * h * channels * 4
    if len(raw) - start < need:
        raise FormatError(f"truncated PFM payload: need {need} bytes", len(raw))
    arr = np.frombuffer(raw, dtype=dtype, count=w * h * channels, offset=start)
    arr = arr.reshape(h, w, channels)[::-1]
    return arr.astype(np.float64)
