"""Environment-map relighting as a weighted sum of directional relights, and
linear color matching of out-of-distribution inputs.

Equirectangular maps are indexed by column ``u`` (longitude) and row ``v``
(latitude, ``v = 0`` at the top). Pixel centers map to
``phi = 2 pi (u + 0.5) / W - pi`` and ``theta = pi (v + 0.5) / H`` and to the
direction ``(sin theta sin phi, cos theta, -sin theta cos phi)``, so the map
center looks along ``-z`` and the top row is near ``+y``.
"""
from __future__ import annotations

import warnings

import numpy as np

from .lighting import DirectionalLight

__all__ = [
    "ENV_SIZE",
    "PATCH_SIZE",
    "EnvLight",
    "downsample_area",
    "pixel_direction",
    "cell_solid_angle",
    "env_to_lights",
    "relight_env",
    "center_patch_mean",
    "color_match_linear",
]

ENV_SIZE = (64, 32)  # width, height
PATCH_SIZE = (51, 76)  # rows, columns


class EnvLight:
    """A unit-intensity directional light with an RGB mixing weight."""

    __slots__ = ("light", "weight", "pixel")

    def __init__(self, light, weight, pixel=None):
        self.light = light
        self.weight = np.asarray(weight, dtype=np.float64)
        self.pixel = pixel

    def __iter__(self):
        return iter((self.light, self.weight))

    def __repr__(self):
        return f"EnvLight(direction={self.light.direction}, weight={self.weight}, pixel={self.pixel})"


def downsample_area(img, width, height):
    """Area-average resampling to ``height x width`` (exact box integration)."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape[:2]

    def weights(n_in, n_out):
        # overlap of input cell [i, i+1) with output cell scaled to input units
        edges = np.arange(n_out + 1) * (n_in / n_out)
        lo = np.maximum(edges[:-1, None], np.arange(n_in)[None, :])
        hi = np.minimum(edges[1:, None], np.arange(n_in)[None, :] + 1)
        m = np.clip(hi - lo, 0.0, None)
        return m / m.sum(axis=1, keepdims=True)

    wy = weights(h, height)
    wx = weights(w, width)
    return np.einsum("ih,hwc,jw->ijc", wy, img, wx)


def pixel_direction(u, v, width=ENV_SIZE[0], height=ENV_SIZE[1]):
    phi = 2.0 * np.pi * (np.asarray(u) + 0.5) / width - np.pi
    theta = np.pi * (np.asarray(v) + 0.5) / height
    return np.stack(
        [np.sin(theta) * np.sin(phi), np.cos(theta), -np.sin(theta) * np.cos(phi)], axis=-1
    )


def cell_solid_angle(v, width=ENV_SIZE[0], height=ENV_SIZE[1]):
    """Solid angle of one pixel in row ``v`` of a ``width x height`` map."""
    t0 = np.pi * v / height
    t1 = np.pi * (v + 1) / height
    return (2.0 * np.pi / width) * (np.cos(t0) - np.cos(t1))


def env_to_lights(env, target_w=ENV_SIZE[0], target_h=ENV_SIZE[1], sin_weight=True):
    """One unit-intensity light per pixel of the downsampled map.

    The weight is the pixel RGB times the exact solid angle of its cell,
    ``(2 pi / W)(cos theta_top - cos theta_bottom)``, which equals
    ``(2 pi / W)(pi / H) sin theta`` up to the constant factor
    ``sinc(pi / 2H)`` and sums to exactly ``4 pi``. With ``sin_weight`` false
    every cell gets the constant ``(2 pi / W)(pi / H)``. Entries with
    all-zero weight are dropped.
    """
    env = np.asarray(env, dtype=np.float64)
    if env.ndim == 2:
        env = env[..., None]
    h, w = env.shape[:2]
    if w != 2 * h:
        warnings.warn(f"environment map is {w}x{h}, not 2:1 equirectangular", stacklevel=2)
    if env.shape[2] == 1:
        env = np.repeat(env, 3, axis=2)
    small = downsample_area(env, target_w, target_h) if (h, w) != (target_h, target_w) else env
    out = []
    for v in range(target_h):
        if sin_weight:
            area = cell_solid_angle(v, target_w, target_h)
        else:
            area = (2.0 * np.pi / target_w) * (np.pi / target_h)
        for u in range(target_w):
            weight = small[v, u] * area
            if not np.any(weight != 0):
                continue
            out.append(EnvLight(DirectionalLight(pixel_direction(u, v, target_w, target_h)),
                                weight, (u, v)))
    return out


def _relight_one(model, img, l_src, light):
    if hasattr(model, "relight"):
        return np.asarray(model.relight(img, l_src, light, clamp=True), dtype=np.float64)
    from .learner.model import relight

    return np.asarray(relight(model, img, l_src, light, clamp=True), dtype=np.float64)


def relight_env(model, img_src, l_src, env_lights, topk=None, clamp=True):
    """``sum_k weight_k * relight(img_src, l_src, light_k)``, clamped after summation.

    ``model`` is a ``ModelParams`` or any object with a
    ``relight(img, l_src, l_dst, clamp)`` method. Lights are summed in a fixed
    order (descending weight, ties broken by direction) so the result does
    not depend on the order of ``env_lights``. ``topk`` keeps only the
    strongest lights by total weight.
    """
    items = [e if isinstance(e, EnvLight) else EnvLight(*e) for e in env_lights]
    if not items:
        raise ValueError("relight_env needs at least one light")
    items.sort(key=lambda e: (-float(e.weight.sum()), tuple(e.light.direction), tuple(e.weight)))
    if topk is not None:
        if topk < 1:
            raise ValueError("topk must be positive")
        items = items[:topk]
    total = None
    for e in items:
        unit = DirectionalLight(e.light.direction)
        contrib = e.weight * _relight_one(model, img_src, l_src, unit)
        total = contrib if total is None else total + contrib
    total = total.astype(np.float32)
    return np.clip(total, 0.0, 1.0) if clamp else total


def center_patch_mean(img, patch=PATCH_SIZE):
    """Per-channel mean of the centered ``rows x cols`` patch."""
    img = np.asarray(img, dtype=np.float64)
    rows, cols = patch
    h, w = img.shape[:2]
    if rows > h or cols > w:
        raise ValueError(f"{rows}x{cols} patch does not fit a {h}x{w} image")
    y0 = (h - rows) // 2
    x0 = (w - cols) // 2
    return img[y0:y0 + rows, x0:x0 + cols].reshape(-1, img.shape[2]).mean(axis=0)


def color_match_linear(img, target_mean, patch=PATCH_SIZE):
    """Scale each channel so the center patch mean equals ``target_mean``."""
    src = center_patch_mean(img, patch)
    if np.any(src == 0):
        raise ValueError("center patch has a zero-mean channel; cannot color match")
    gain = np.asarray(target_mean, dtype=np.float64) / src
    return (np.asarray(img, dtype=np.float64) * gain).astype(np.float32)
