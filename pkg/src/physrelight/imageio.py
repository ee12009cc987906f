"""Raster storage helpers: PFM and PNG files, sRGB transfer, crops and flips.

Rasters are plain ``numpy`` arrays of shape ``(H, W, C)`` with ``C`` in
``{1, 3}`` and dtype ``float32``, holding linear radiance.
"""
from __future__ import annotations

import os
import re

import numpy as np

__all__ = [
    "PFMFormatError",
    "as_raster",
    "clamp01",
    "load_pfm",
    "save_pfm",
    "linear_to_srgb",
    "srgb_to_linear",
    "save_png_srgb",
    "crop",
    "flip",
]


class PFMFormatError(ValueError):
    """Raised for malformed PFM files; ``offset`` is the failing byte."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def as_raster(img, dtype=np.float32):
    """Return ``img`` as a C-contiguous ``(H, W, C)`` array with C in {1, 3}."""
    arr = np.asarray(img, dtype=dtype)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3 or arr.shape[2] not in (1, 3):
        raise ValueError(f"raster must be HxWx1 or HxWx3, got shape {arr.shape}")
    return np.ascontiguousarray(arr)


def clamp01(img):
    return np.clip(img, 0.0, 1.0)


_TOKEN = re.compile(rb"\S+")


def _next_token(buf, pos):
    m = _TOKEN.search(buf, pos)
    if m is None:
        raise PFMFormatError("unexpected end of header", len(buf))
    return m.group(0), m.start(), m.end()


def load_pfm(path):
    """Read a PFM file into a top-down ``(H, W, C)`` float32 raster.

    Values are returned exactly as stored; no clamping is applied.
    """
    with open(path, "rb") as fh:
        buf = fh.read()

    magic, start, pos = _next_token(buf, 0)
    if magic == b"PF":
        channels = 3
    elif magic == b"Pf":
        channels = 1
    else:
        raise PFMFormatError(f"unsupported PFM magic {magic!r}", start)

    dims = []
    for _ in range(2):
        tok, start, pos = _next_token(buf, pos)
        try:
            val = int(tok)
        except ValueError:
            raise PFMFormatError(f"bad dimension {tok!r}", start) from None
        if val <= 0:
            raise PFMFormatError(f"nonpositive dimension {val}", start)
        dims.append(val)
    width, height = dims

    tok, start, pos = _next_token(buf, pos)
    try:
        scale = float(tok)
    except ValueError:
        raise PFMFormatError(f"bad scale {tok!r}", start) from None
    if scale == 0.0:
        raise PFMFormatError("scale must be nonzero", start)
    # exactly one whitespace byte separates the header from the payload
    if pos >= len(buf) or buf[pos:pos + 1] not in (b"\n", b"\r", b" ", b"\t"):
        raise PFMFormatError("missing header terminator", pos)
    pos += 1

    count = width * height * channels
    nbytes = count * 4
    if len(buf) - pos < nbytes:
        raise PFMFormatError(
            f"truncated payload: need {nbytes} bytes, found {len(buf) - pos}", len(buf)
        )
    dtype = np.dtype("<f4") if scale < 0 else np.dtype(">f4")
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    img = data.astype(np.float32).reshape(height, width, channels)
    return np.ascontiguousarray(img[::-1])


def save_pfm(img, path):
    """Write ``img`` as little-endian PFM with bottom-up scanlines."""
    arr = as_raster(img)
    height, width, channels = arr.shape
    magic = b"PF" if channels == 3 else b"Pf"
    header = magic + b"\n" + f"{width} {height}\n-1.0\n".encode("ascii")
    payload = np.ascontiguousarray(arr[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def linear_to_srgb(x):
    """IEC 61966-2-1 transfer; input is clamped to [0, 1] first."""
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1.0 / 2.4) - 0.055)


def srgb_to_linear(x):
    x = np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)
    return np.where(x <= 0.04045, x / 12.92, np.power((x + 0.055) / 1.055, 2.4))


def save_png_srgb(img, path):
    """Clamp, sRGB-encode and quantize to an 8-bit PNG (no alpha)."""
    from PIL import Image

    arr = as_raster(img)
    enc = np.round(255.0 * linear_to_srgb(arr)).astype(np.uint8)
    if enc.shape[2] == 1:
        Image.fromarray(enc[:, :, 0], mode="L").save(path, format="PNG")
    else:
        Image.fromarray(enc, mode="RGB").save(path, format="PNG")
    return os.fspath(path)


def crop(img, x0, y0, w, h):
    """Return the ``w`` x ``h`` window whose top-left pixel is ``(x0, y0)``."""
    height, width = img.shape[:2]
    if w <= 0 or h <= 0 or x0 < 0 or y0 < 0 or x0 + w > width or y0 + h > height:
        raise ValueError(
            f"crop window ({x0},{y0},{w},{h}) outside {width}x{height} raster"
        )
    return img[y0:y0 + h, x0:x0 + w].copy()


def flip(img, axis):
    """Mirror raster data only. ``axis`` is ``"h"`` (left/right) or ``"v"`` (up/down)."""
    if axis in ("h", "horizontal"):
        return img[:, ::-1].copy()
    if axis in ("v", "vertical"):
        return img[::-1].copy()
    raise ValueError(f"unknown flip axis {axis!r}")
