"""Binary PPM/PGM codecs, bilinear resizing and mean subtraction."""

from __future__ import annotations

from pathlib import Path
from typing import Iterable, Sequence

import numpy as np


class ImageFormatError(ValueError):
    pass


_WS = b" \t\n\r\v\f"


def _read_header(data: bytes, magic: bytes, nfields: int) -> tuple[list[int], int]:
    if data[:2] != magic:
        raise ImageFormatError(f"bad magic {data[:2]!r}, expected {magic!r}")
    pos, fields = 2, []
    while len(fields) < nfields:
        if pos >= len(data):
            raise ImageFormatError("truncated header")
        ch = data[pos : pos + 1]
        if ch in (b"#",):
            end = data.find(b"\n", pos)
            if end < 0:
                raise ImageFormatError("truncated header comment")
            pos = end + 1
        elif ch and ch in _WS:
            pos += 1
        else:
            start = pos
            while pos < len(data) and data[pos : pos + 1] not in _WS and data[pos : pos + 1] != b"#":
                pos += 1
            token = data[start:pos]
            if not token.isdigit():
                raise ImageFormatError(f"bad header token {token!r}")
            fields.append(int(token))
    # exactly one whitespace byte separates maxval from the raster
    if pos >= len(data) or data[pos : pos + 1] not in _WS:
        raise ImageFormatError("missing whitespace after header")
    return fields, pos + 1


def decode_ppm(data: bytes) -> np.ndarray:
    """Binary P6 (maxval 255) -> float32 tensor (1, 3, H, W) in [0, 255]."""
    (w, h, maxval), offset = _read_header(data, b"P6", 3)
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad image size {w}x{h}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}, only 255 is accepted")
    need = w * h * 3
    body = data[offset:]
    if len(body) < need:
        raise ImageFormatError(f"truncated raster: {len(body)} of {need} bytes")
    pix = np.frombuffer(body, dtype=np.uint8, count=need).reshape(h, w, 3)
    return pix.transpose(2, 0, 1)[None].astype(np.float32)


def encode_ppm(image: np.ndarray) -> bytes:
    """(1, 3, H, W) or (3, H, W) values in [0, 255] -> binary P6; values are
    rounded and clipped."""
    img = np.asarray(image)
    if img.ndim == 4:
        img = img[0]
    if img.ndim != 3 or img.shape[0] != 3:
        raise ImageFormatError(f"expected a 3-channel image, got shape {image.shape}")
    _, h, w = img.shape
    pix = np.clip(np.rint(img), 0, 255).astype(np.uint8).transpose(1, 2, 0)
    return b"P6\n%d %d\n255\n" % (w, h) + pix.tobytes()


def encode_pgm(gray: np.ndarray) -> bytes:
    g = np.asarray(gray)
    if g.ndim != 2:
        raise ImageFormatError(f"expected a 2-D grayscale array, got shape {g.shape}")
    h, w = g.shape
    return b"P5\n%d %d\n255\n" % (w, h) + np.clip(np.rint(g), 0, 255).astype(np.uint8).tobytes()


def decode_pgm(data: bytes) -> np.ndarray:
    (w, h, maxval), offset = _read_header(data, b"P5", 3)
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}")
    body = data[offset:]
    if len(body) < w * h:
        raise ImageFormatError("truncated raster")
    return np.frombuffer(body, dtype=np.uint8, count=w * h).reshape(h, w).copy()


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())


def write_ppm(image, path):
    Path(path).write_bytes(encode_ppm(image))


def _axis_weights(n_in: int, n_out: int):
    # align-corners=False sampling with edge clamping
    scale = n_in / n_out
    src = (np.arange(n_out) + 0.5) * scale - 0.5
    src = np.clip(src, 0, n_in - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    return lo, hi, frac


def resize_bilinear(image: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Bilinear resize of (N, C, H, W) to (N, C, height, width); aspect ratio
    is not preserved. ``width`` defaults to ``height``."""
    width = height if width is None else width
    if height < 1 or width < 1:
        raise ValueError(f"target size must be positive, got {height}x{width}")
    img = np.asarray(image, dtype=np.float64)
    _, _, h, w = img.shape
    if (h, w) == (height, width):
        return img.astype(np.float32)
    y0, y1, fy = _axis_weights(h, height)
    x0, x1, fx = _axis_weights(w, width)
    rows = img[:, :, y0, :] * (1 - fy)[:, None] + img[:, :, y1, :] * fy[:, None]
    out = rows[:, :, :, x0] * (1 - fx) + rows[:, :, :, x1] * fx
    return out.astype(np.float32)


def compute_channel_means(images: Iterable[np.ndarray]) -> tuple[float, float, float]:
    """Per-channel mean over every pixel of every image (images may differ in size)."""
    sums = np.zeros(3, dtype=np.float64)
    count = 0
    for img in images:
        img = np.asarray(img, dtype=np.float64)
        if img.ndim == 4:
            img = img[0]
        sums += img.reshape(3, -1).sum(axis=1)
        count += img.shape[1] * img.shape[2]
    if count == 0:
        raise ValueError("cannot compute channel means of an empty image set")
    return tuple(float(v) for v in sums / count)


def preprocess(image: np.ndarray, side: int, channel_means: Sequence[float] = (0.0, 0.0, 0.0)) -> np.ndarray:
    """Resize to ``side`` x ``side`` and subtract per-channel means."""
    out = resize_bilinear(image, side).astype(np.float64)
    out -= np.asarray(channel_means, dtype=np.float64)[None, :, None, None]
    return out.astype(np.float32)


def tile_feature_map(act: np.ndarray) -> np.ndarray:
    """Render an activation as an 8-bit grayscale grid.

    (C, H, W) maps are tiled in a near-square grid, each channel min-max
    scaled to 0..255 on its own; (D,) vectors become a 1-pixel-tall strip
    scaled as one map. Constant maps render as 128; unused cells are 0.
    """
    a = np.asarray(act, dtype=np.float64)
    if a.ndim == 1:
        return _minmax(a)[None, :]
    if a.ndim != 3:
        raise ValueError(f"expected (C, H, W) or (D,), got shape {a.shape}")
    c, h, w = a.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    grid = np.zeros((rows * h, cols * w), dtype=np.uint8)
    for i in range(c):
        r, q = divmod(i, cols)
        grid[r * h : (r + 1) * h, q * w : (q + 1) * w] = _minmax(a[i])
    return grid


def _minmax(x: np.ndarray) -> np.ndarray:
    lo, hi = x.min(), x.max()
    if hi == lo:
        return np.full(x.shape, 128, dtype=np.uint8)
    return np.rint((x - lo) * (255.0 / (hi - lo))).astype(np.uint8)
