"""Light-consistent data augmentation: flips, intensity scaling, calibration
jitter and random crops.

Every transform maps an :class:`~physrelight.synth.IntrinsicSet` to another
one that still satisfies ``I = (A * S + R) * V``.
"""
from __future__ import annotations

import numpy as np

from .imageio import crop as crop_raster
from .imageio import flip as flip_raster
from .lighting import DirectionalLight
from .synth import LAYERS

__all__ = [
    "AXES",
    "SCALE_RANGE",
    "JITTER_STD",
    "flip_light",
    "flip_normals",
    "flip_sample",
    "flip_composite",
    "expand_flips",
    "scale_sample",
    "draw_scale",
    "jitter_light",
    "random_crop",
    "crop_window",
]

AXES = {"h": 0, "horizontal": 0, "v": 1, "vertical": 1}
SCALE_RANGE = (0.6, 1.1)
JITTER_STD = 0.01

# flip combinations used for the factor-4 expansion
FLIP_SETS = ((), ("h",), ("v",), ("h", "v"))


def _axis(axis):
    try:
        return AXES[axis]
    except KeyError:
        raise ValueError(f"flip axis must be 'h' or 'v', got {axis!r}") from None


def flip_light(light, axis):
    """Mirror a light: horizontal negates x, vertical negates y."""
    d = light.direction.copy()
    d[_axis(axis)] *= -1.0
    return DirectionalLight(d, light.intensity)


def flip_normals(normals, axis):
    """Mirror a normal map ``(..., H, W, 3)`` and negate the matching component."""
    k = _axis(axis)
    out = np.flip(normals, axis=-2 if k == 0 else -3).copy()
    out[..., k] *= -1.0
    return out


def flip_sample(sample, axis):
    """Mirror every raster of ``sample`` and adapt normals and light."""
    k = _axis(axis)
    changes = {}
    for name, raster in sample.layers().items():
        if name == "normals":
            changes[name] = flip_normals(raster, axis)
        else:
            changes[name] = flip_raster(raster, "h" if k == 0 else "v")
    changes["light"] = flip_light(sample.light, axis)
    return sample.replace(**changes)


def flip_composite(sample, flips):
    for axis in flips:
        sample = flip_sample(sample, axis)
    return sample


def expand_flips(sample):
    """The identity, horizontal, vertical and double flip of ``sample``."""
    return [flip_composite(sample, f) for f in FLIP_SETS]


def scale_sample(sample, s):
    """Scale image, shading, residual and light intensity by ``s > 0``."""
    s = float(s)
    if not s > 0:
        raise ValueError(f"scale must be positive, got {s}")
    dt = sample.image.dtype
    return sample.replace(
        image=(sample.image * s).astype(dt),
        shading=(sample.shading * s).astype(dt),
        residual=(sample.residual * s).astype(dt),
        light=sample.light.scaled(s),
    )


def draw_scale(rng, low=SCALE_RANGE[0], high=SCALE_RANGE[1]):
    return float(rng.uniform(low, high))


def jitter_light(light, rng, std=JITTER_STD):
    """Add i.i.d. Gaussian noise to the direction components and renormalize."""
    d = light.direction + rng.normal(0.0, std, size=3)
    return DirectionalLight(d, light.intensity)


def crop_window(height, width, h, w, rng):
    """Uniform top-left corner ``(y0, x0)`` of an ``h x w`` window."""
    if h > height or w > width or h < 1 or w < 1:
        raise ValueError(f"crop {w}x{h} does not fit a {width}x{height} frame")
    y0 = int(rng.integers(0, height - h + 1))
    x0 = int(rng.integers(0, width - w + 1))
    return y0, x0


def random_crop(sample, w, h, rng):
    """Apply one random ``w x h`` window to every raster of ``sample``."""
    height, width = sample.image.shape[:2]
    y0, x0 = crop_window(height, width, h, w, rng)
    return sample.replace(**{name: crop_raster(getattr(sample, name), x0, y0, w, h) for name in LAYERS})
