"""Calibrated Lambertian photometric stereo and residual extraction.

Each pixel is solved independently: observations whose luminance falls
outside ``[tlo, thi]`` are dropped as shadowed or specular, then per color
channel the scaled normal ``g_c`` is fit by least squares against the
intensity-weighted light directions. The unit normal is the direction of
``sum_c g_c`` and the albedo is the projection of each ``g_c`` on it.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import formation

__all__ = [
    "Thresholds",
    "luminance",
    "solve_pixel",
    "solve_image",
    "compute_residual",
    "estimate_visibility",
]

LUMA = np.array([0.2126, 0.7152, 0.0722])
MAX_COND = 1e8


@dataclass(frozen=True)
class Thresholds:
    tlo: float = 0.02
    thi: float = 0.98


def luminance(rgb):
    rgb = np.asarray(rgb)
    if rgb.shape[-1] == 1:
        return rgb[..., 0]
    return rgb @ LUMA.astype(rgb.dtype)


def _light_rows(lights):
    dirs = np.stack([l.direction for l in lights])  # (K, 3)
    inten = np.stack([l.intensity for l in lights])  # (K, 3) per channel
    return dirs, inten


def _solve(obs, lights, thresholds):
    """Vectorized core. ``obs`` is ``(P, K, 3)`` float64."""
    if len(lights) < 3:
        raise ValueError("photometric stereo needs at least 3 lights")
    dirs, inten = _light_rows(lights)
    lum = luminance(obs)  # (P, K)
    sel = ((lum >= thresholds.tlo) & (lum <= thresholds.thi)).astype(np.float64)

    # M[p, c] = sum_k sel * i_kc^2 d_k d_k^T ; b[p, c] = sum_k sel * i_kc * I_kc d_k
    outer = dirs[:, :, None] * dirs[:, None, :]  # (K, 3, 3)
    w = sel[:, :, None] * inten[None] ** 2  # (P, K, C)
    M = np.einsum("pkc,kij->pcij", w, outer)
    b = np.einsum("pkc,ki->pci", sel[:, :, None] * inten[None] * obs, dirs)

    count = sel.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        cond = np.linalg.cond(M.reshape(-1, 3, 3)).reshape(M.shape[:2]).max(axis=1)
    valid = (count >= 3) & np.isfinite(cond) & (cond <= MAX_COND)

    g = np.zeros(b.shape)
    if np.any(valid):
        g[valid] = np.linalg.solve(M[valid], b[valid][..., None])[..., 0]
    gsum = g.sum(axis=1)
    norm = np.linalg.norm(gsum, axis=-1)
    valid &= norm > 0
    normal = np.zeros(gsum.shape)
    normal[valid] = gsum[valid] / norm[valid, None]
    albedo = np.maximum(0.0, np.einsum("pci,pi->pc", g, normal))
    albedo[~valid] = 0.0
    return albedo, normal, valid


def solve_pixel(observations, lights, thresholds=Thresholds()):
    """Solve one pixel from ``(K, 3)`` observations; returns ``(albedo, normal, valid)``."""
    obs = np.asarray(observations, dtype=np.float64)
    if obs.ndim == 1:
        obs = np.repeat(obs[:, None], 3, axis=1)
    if obs.shape[0] != len(lights):
        raise ValueError("one observation per light required")
    a, n, v = _solve(obs[None], list(lights), thresholds)
    return a[0], n[0], bool(v[0])


def solve_image(frames, lights, thresholds=Thresholds()):
    """Photometric stereo over an OLAT stack.

    Parameters
    ----------
    frames : sequence of (H, W, 3) rasters, one per light
    lights : LightSet or sequence of DirectionalLight

    Returns
    -------
    albedo : (H, W, 3) float32
    normals : (H, W, 3) float32, zero where invalid
    valid : (H, W) bool
    """
    lights = list(lights)
    stack = [np.asarray(f) for f in frames]
    if len(stack) != len(lights):
        raise ValueError(f"{len(stack)} frames for {len(lights)} lights")
    shape = stack[0].shape
    for f in stack:
        if f.shape != shape:
            raise ValueError(f"frame size mismatch: {f.shape} vs {shape}")
    if len(shape) == 2 or shape[-1] == 1:
        stack = [np.repeat(f.reshape(shape[0], shape[1], 1), 3, axis=2) for f in stack]
    h, w = shape[:2]
    obs = np.stack(stack, axis=2).reshape(h * w, len(lights), 3).astype(np.float64)
    albedo, normal, valid = _solve(obs, lights, thresholds)
    return (
        albedo.reshape(h, w, 3).astype(np.float32),
        normal.reshape(h, w, 3).astype(np.float32),
        valid.reshape(h, w),
    )


def compute_residual(image, albedo, normals, light, visibility):
    """``R = I - A * S`` on lit pixels, 0 where ``visibility`` is 0."""
    image, albedo, normals = map(np.asarray, (image, albedo, normals))
    vis = np.asarray(visibility)
    if vis.ndim == image.ndim - 1:
        vis = vis[..., None]
    if not (image.shape == albedo.shape == normals.shape) or vis.shape[:-1] != image.shape[:-1]:
        raise ValueError("compute_residual: shape mismatch")
    diffuse = formation.relight_diffuse(albedo, normals, light)
    return np.where(vis > 0, image - diffuse, 0).astype(np.float32)


def estimate_visibility(image, albedo, normals, light, valid, thresholds=Thresholds()):
    """Binary cast-shadow estimate for PMS-only supervision.

    A valid pixel is marked shadowed when the diffuse prediction is clearly lit
    but the observation is less than half of it. Invalid pixels are visible
    iff they received any light.
    """
    d_lum = luminance(formation.relight_diffuse(albedo, normals, light))
    i_lum = luminance(image)
    shadow = (d_lum > thresholds.tlo) & (i_lum < 0.5 * d_lum)
    vis = np.where(valid, ~shadow, i_lum > 0)
    return vis[..., None].astype(np.float32)
