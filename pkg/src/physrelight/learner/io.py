"""Binary model files.

Layout (all integers little-endian)::

    b"RLM1"
    u32 config_length, config JSON (utf-8)
    u32 blob_count
    per blob: u16 name_length, name (utf-8), u8 ndim, ndim x u32 shape,
              prod(shape) little-endian float32 values
"""
from __future__ import annotations

import json
import os
import struct

import numpy as np

from .model import ModelParams, TrainConfig, init_params

__all__ = ["MAGIC", "ModelFileError", "save_model", "load_model"]

MAGIC = b"RLM1"


class ModelFileError(ValueError):
    pass


def save_model(model, path, extra=None):
    """Write parameters and the config echo; ``extra`` is stored in the JSON header."""
    header = {"config": model.config.to_dict(), "extra": extra or {}}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(blob)), blob]
    arrays = model.arrays()
    parts.append(struct.pack("<I", len(arrays)))
    for name in sorted(arrays):
        arr = np.asarray(arrays[name], dtype="<f4")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(parts))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise ModelFileError(f"{self.path}: truncated at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_model(path, return_extra=False):
    """Read a model file; checks every blob against the configured architecture."""
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise ModelFileError(f"{path}: {exc.strerror}") from None
    rd = _Reader(buf, path)
    if rd.take(4) != MAGIC:
        raise ModelFileError(f"{path}: not an RLM1 model file")
    (n,) = rd.unpack("<I")
    try:
        header = json.loads(rd.take(n).decode("utf-8"))
        config = TrainConfig.from_dict(header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ModelFileError(f"{path}: bad config header ({exc})") from None
    (count,) = rd.unpack("<I")
    params = {}
    for _ in range(count):
        (ln,) = rd.unpack("<H")
        name = rd.take(ln).decode("utf-8")
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        size = int(np.prod(shape)) if ndim else 1
        params[name] = np.frombuffer(rd.take(4 * size), dtype="<f4").reshape(shape).astype(np.float32)
    if rd.pos != len(buf):
        raise ModelFileError(f"{path}: {len(buf) - rd.pos} trailing bytes")
    expected = init_params(config)
    if set(expected) != set(params):
        raise ModelFileError(f"{path}: parameter names do not match the configured architecture")
    for k, v in expected.items():
        if v.shape != params[k].shape:
            raise ModelFileError(f"{path}: {k} has shape {params[k].shape}, expected {v.shape}")
    model = ModelParams(config, params)
    return (model, header.get("extra", {})) if return_extra else model
