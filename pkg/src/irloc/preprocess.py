"""CLAHE contrast enhancement for 8-bit thermal frames, plus binary PGM I/O."""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from irloc.errors import FormatError, IrlocError


@dataclass(frozen=True)
class ClaheParams:
    tiles_x: int = 8
    tiles_y: int = 8
    clip_limit: float = 3.0

    def __post_init__(self):
        if self.tiles_x < 1 or self.tiles_y < 1:
            raise IrlocError("tile grid must be at least 1x1")
        if not np.isfinite(self.clip_limit) or self.clip_limit < 1.0:
            raise IrlocError("clip_limit must be finite and >= 1.0")


def _tile_edges(size: int, tiles: int) -> np.ndarray:
    return (np.arange(tiles + 1) * size) // tiles


def clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    """Clip at ``limit`` and hand the excess back evenly to bins with room.

    Repeating uniform redistribution until nothing exceeds the limit converges
    to ``min(min(h, limit) + c, limit)`` for one water level ``c``; that level
    is solved for directly so the total count is preserved.
    """
    h = np.minimum(hist.astype(np.float64), limit)
    excess = hist.sum() - h.sum()
    if excess <= 0:
        return h
    return np.minimum(h + _water_level(np.sort(limit - h), excess), limit)


def _water_level(room_sorted: np.ndarray, excess: float) -> float:
    n = len(room_sorted)
    filled = 0.0
    for i in range(n):
        c = (excess - filled) / (n - i)
        if c <= room_sorted[i]:
            return c
        filled += room_sorted[i]
    return float(room_sorted[-1])


def tile_mapping(tile: np.ndarray, clip_limit: float) -> np.ndarray:
    """256-entry lookup table: floor of the clipped CDF scaled to [0, 255]."""
    n = tile.size
    hist = np.bincount(tile.ravel(), minlength=256)
    clipped = clip_histogram(hist, clip_limit * n / 256.0)
    cdf = np.cumsum(clipped)
    # the epsilon absorbs summation error on exact integer boundaries
    lut = np.floor(255.0 * cdf / n + 1e-9)
    return np.clip(lut, 0, 255)


def clahe(img: np.ndarray, params: ClaheParams = ClaheParams()) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise IrlocError("clahe expects a 2-D uint8 image")
    h, w = img.shape
    ty, tx = params.tiles_y, params.tiles_x
    if h < ty or w < tx:
        raise IrlocError(f"image {w}x{h} is smaller than the {tx}x{ty} tile grid")
    ye = _tile_edges(h, ty)
    xe = _tile_edges(w, tx)
    luts = np.empty((ty, tx, 256))
    for j in range(ty):
        for i in range(tx):
            luts[j, i] = tile_mapping(img[ye[j] : ye[j + 1], xe[i] : xe[i + 1]], params.clip_limit)

    # fractional tile coordinate of every pixel relative to tile centres
    cy = (ye[:-1] + ye[1:] - 1) / 2.0
    cx = (xe[:-1] + xe[1:] - 1) / 2.0
    gy = np.interp(np.arange(h), cy, np.arange(ty)) if ty > 1 else np.zeros(h)
    gx = np.interp(np.arange(w), cx, np.arange(tx)) if tx > 1 else np.zeros(w)
    y0 = np.floor(gy).astype(int)
    x0 = np.floor(gx).astype(int)
    y1 = np.minimum(y0 + 1, ty - 1)
    x1 = np.minimum(x0 + 1, tx - 1)
    fy = (gy - y0)[:, None]
    fx = (gx - x0)[None, :]

    v = img.astype(np.intp)
    Y0, Y1 = y0[:, None], y1[:, None]
    X0, X1 = x0[None, :], x1[None, :]
    out = (
        (1 - fy) * ((1 - fx) * luts[Y0, X0, v] + fx * luts[Y0, X1, v])
        + fy * ((1 - fx) * luts[Y1, X0, v] + fx * luts[Y1, X1, v])
    )
    # round half up
    return np.clip(np.floor(out + 0.5), 0, 255).astype(np.uint8)


# ---------------------------------------------------------------- PGM

_HEADER_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n?)*([^\s#]+)")


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise FormatError("unsupported PGM variant", 0)
    pos = 2
    vals = []
    for _ in range(3):
        m = _HEADER_TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated PGM header", pos)
        try:
            vals.append(int(m.group(1)))
        except ValueError:
            raise FormatError("malformed PGM header", m.start(1)) from None
        pos = m.end()
    width, height, maxval = vals
    if maxval != 255:
        raise FormatError(f"unsupported PGM maxval {maxval}", pos)
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", pos)
    pos += 1
    n = width * height
    if len(buf) - pos < n:
        raise FormatError(f"truncated PGM raster: need {n} bytes, {len(buf) - pos} available", pos)
    return np.frombuffer(buf, dtype=np.uint8, count=n, offset=pos).reshape(height, width).copy()


def write_pgm(img: np.ndarray, path) -> None:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 2:
        raise IrlocError("write_pgm expects a 2-D uint8 image")
    h, w = img.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + img.tobytes())
