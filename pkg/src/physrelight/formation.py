"""Explicit image formation operators.

All operators act on channel-last arrays ``(..., C)`` so the same kernels
serve the oracle renderer (``H, W, C``) and batched network tensors
(``N, H, W, C``). Visibility is single-channel and broadcasts over color.

The composed pixel value is ``(albedo * shading + residual) * visibility``,
with ``shading = intensity * max(0, <n, l>)`` for one directional light.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Optional

import numpy as np

from .lighting import DirectionalLight

__all__ = [
    "FormationBatch",
    "shading",
    "shading_vjp",
    "cosine",
    "diffuse_render",
    "compose",
    "relight_diffuse",
]


def _dtype(*arrays):
    return np.result_type(*[np.asarray(a).dtype for a in arrays], np.float32)


def _check_same(a, b, what):
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def cosine(normals, light):
    """``<n, l>`` per pixel, keeping a trailing singleton channel."""
    normals = np.asarray(normals)
    if normals.shape[-1] != 3:
        raise ValueError("normal map must have 3 channels")
    dt = _dtype(normals)
    d = light.direction.astype(dt)
    return (normals[..., 0:1] * d[0] + normals[..., 1:2] * d[1]) + normals[..., 2:3] * d[2]


def shading(normals, light):
    """Per-channel shading ``intensity_c * max(0, <n, l>)``; zero normals give 0."""
    normals = np.asarray(normals)
    dt = _dtype(normals)
    cos = cosine(normals, light)
    return light.intensity.astype(dt) * np.maximum(cos, 0).astype(dt)


def shading_vjp(normals, light, grad_out):
    """Vector-Jacobian product of :func:`shading` w.r.t. the normals.

    The subgradient on the clamp boundary ``<n, l> = 0`` is taken as 0.
    """
    normals = np.asarray(normals)
    dt = _dtype(normals, grad_out)
    cos = cosine(normals, light)
    g = np.sum(grad_out * light.intensity.astype(dt), axis=-1, keepdims=True)
    g = np.where(cos > 0, g, 0).astype(dt)
    return g * light.direction.astype(dt)


def diffuse_render(albedo, shade):
    albedo, shade = np.asarray(albedo), np.asarray(shade)
    _check_same(albedo, shade, "diffuse_render")
    return albedo * shade


def compose(diffuse, residual, visibility):
    """``(diffuse + residual) * visibility``; no clamping, residual may be negative."""
    diffuse, residual, visibility = map(np.asarray, (diffuse, residual, visibility))
    _check_same(diffuse, residual, "compose")
    if visibility.shape[:-1] != diffuse.shape[:-1] or visibility.shape[-1] not in (
        1,
        diffuse.shape[-1],
    ):
        raise ValueError(
            f"compose: visibility shape {visibility.shape} incompatible with {diffuse.shape}"
        )
    return (diffuse + residual) * visibility


def relight_diffuse(albedo, normals, light):
    """Diffuse-only relighting: albedo times shading under ``light``."""
    return diffuse_render(albedo, shading(normals, light))


@dataclass
class FormationBatch:
    """Intrinsic states filled in stage by stage."""

    light: DirectionalLight
    albedo: Optional[np.ndarray] = None
    normals: Optional[np.ndarray] = None
    shading: Optional[np.ndarray] = None
    diffuse: Optional[np.ndarray] = None
    residual: Optional[np.ndarray] = None
    visibility: Optional[np.ndarray] = None
    output: Optional[np.ndarray] = None

    def run(self):
        """Populate every derivable slot from albedo, normals, residual and visibility."""
        if self.shading is None and self.normals is not None:
            self.shading = shading(self.normals, self.light)
        if self.diffuse is None and self.albedo is not None and self.shading is not None:
            self.diffuse = diffuse_render(self.albedo, self.shading)
        if self.output is None and self.diffuse is not None:
            res = self.residual if self.residual is not None else np.zeros_like(self.diffuse)
            vis = (
                self.visibility
                if self.visibility is not None
                else np.ones(self.diffuse.shape[:-1] + (1,), self.diffuse.dtype)
            )
            self.output = compose(self.diffuse, res, vis)
        self.validate()
        return self

    def validate(self):
        spatial = None
        for f in fields(self):
            if f.name == "light":
                continue
            val = getattr(self, f.name)
            if val is None:
                continue
            if spatial is None:
                spatial = val.shape[:-1]
            elif val.shape[:-1] != spatial:
                raise ValueError(f"slot {f.name} has shape {val.shape}, expected {spatial}+(C,)")
        if self.shading is not None and np.any(self.shading < 0):
            raise ValueError("shading must be nonnegative")
        if self.visibility is not None and (
            np.any(self.visibility < 0) or np.any(self.visibility > 1)
        ):
            raise ValueError("visibility must lie in [0, 1]")
