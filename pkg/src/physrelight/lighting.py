"""Directional lights, light-set text files and chrome-sphere calibration.

Camera coordinates are right-handed with +x right, +y up and the camera
looking down -z. A light direction points from the surface toward the light.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DirectionalLight",
    "LightSet",
    "LightFileError",
    "CalibrationError",
    "parse_light_line",
    "format_light_line",
    "load_lights",
    "save_lights",
    "standard_rig",
    "calibrate_from_sphere",
]


class LightFileError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class DirectionalLight:
    direction: np.ndarray
    intensity: np.ndarray = field(default_factory=lambda: np.ones(3))

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64).reshape(3)
        norm = float(np.linalg.norm(d))
        if not np.isfinite(norm) or norm == 0.0:
            raise ValueError("light direction must be a nonzero finite vector")
        inten = np.asarray(self.intensity, dtype=np.float64)
        inten = np.broadcast_to(inten, (3,)).copy()
        if np.any(inten < 0):
            raise ValueError("light intensity must be nonnegative")
        d = d / norm
        d.flags.writeable = False
        inten.flags.writeable = False
        object.__setattr__(self, "direction", d)
        object.__setattr__(self, "intensity", inten)

    def with_intensity(self, intensity):
        return DirectionalLight(self.direction, intensity)

    def scaled(self, s):
        return DirectionalLight(self.direction, self.intensity * s)

    def encoding(self):
        """3-vector used to condition the networks: direction times mean intensity."""
        return self.direction * float(np.mean(self.intensity))

    def __eq__(self, other):
        if not isinstance(other, DirectionalLight):
            return NotImplemented
        return np.array_equal(self.direction, other.direction) and np.array_equal(
            self.intensity, other.intensity
        )

    def __hash__(self):
        return hash((self.direction.tobytes(), self.intensity.tobytes()))


@dataclass
class LightSet:
    lights: list
    ids: list

    def __post_init__(self):
        if not self.lights:
            raise ValueError("light set must not be empty")
        if len(self.ids) != len(self.lights):
            raise ValueError("ids and lights differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("light ids must be unique")

    def __len__(self):
        return len(self.lights)

    def __iter__(self):
        return iter(self.lights)

    def __getitem__(self, i):
        return self.lights[i]

    def by_id(self, light_id):
        return self.lights[self.ids.index(light_id)]

    def matrix(self):
        """Rows are intensity-weighted directions, shape ``(K, 3, 3)`` as (light, channel, xyz)."""
        return np.stack([l.intensity[:, None] * l.direction[None, :] for l in self.lights])


def parse_light_line(text, lineno=None):
    where = f"line {lineno}: " if lineno is not None else ""
    parts = text.split()
    if len(parts) == 6:
        parts = ["0"] + parts
    if len(parts) != 7:
        raise LightFileError(f"{where}expected 'id dx dy dz ir ig ib', got {text.strip()!r}")
    try:
        lid = int(parts[0])
        vals = [float(p) for p in parts[1:]]
    except ValueError:
        raise LightFileError(f"{where}non-numeric field in {text.strip()!r}") from None
    d = np.array(vals[:3])
    if not np.all(np.isfinite(d)) or np.linalg.norm(d) == 0.0:
        raise LightFileError(f"{where}zero-length light direction")
    try:
        light = DirectionalLight(d, vals[3:])
    except ValueError as exc:
        raise LightFileError(f"{where}{exc}") from None
    return lid, light


def format_light_line(light_id, light):
    vals = list(light.direction) + list(light.intensity)
    return f"{light_id} " + " ".join(f"{v:.9g}" for v in vals)


def load_lights(path):
    lights, ids = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if not stripped:
                continue
            lid, light = parse_light_line(stripped, lineno)
            ids.append(lid)
            lights.append(light)
    if not lights:
        raise LightFileError(f"{path}: no lights found")
    return LightSet(lights, ids)


def save_lights(light_set, path):
    with open(path, "w") as fh:
        for lid, light in zip(light_set.ids, light_set.lights):
            fh.write(format_light_line(lid, light) + "\n")


def standard_rig(n=32, max_polar_deg=65.0):
    """Deterministic white-light rig: a Fibonacci spiral over a spherical cap
    around the viewing axis (+z), polar angle up to ``max_polar_deg``."""
    golden = np.pi * (3.0 - np.sqrt(5.0))
    cos_min = np.cos(np.radians(max_polar_deg))
    lights = []
    for k in range(n):
        z = 1.0 - (k + 0.5) / n * (1.0 - cos_min)
        r = np.sqrt(max(0.0, 1.0 - z * z))
        phi = golden * k
        lights.append(DirectionalLight([r * np.cos(phi), r * np.sin(phi), z], np.ones(3)))
    return LightSet(lights, list(range(n)))


def calibrate_from_sphere(img, center, radius, reflectance=1.0, top_fraction=0.001):
    """Recover a directional light from an orthographic chrome-sphere image.

    The highlight is the intensity-weighted centroid of the brightest
    ``top_fraction`` of the disc pixels; the mirror normal there gives the
    light direction by reflecting the view vector (0, 0, 1).
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    height, width = img.shape[:2]
    cx, cy = float(center[0]), float(center[1])
    radius = float(radius)
    if cx - radius < 0 or cy - radius < 0 or cx + radius > width or cy + radius > height:
        raise CalibrationError("sphere disc is not fully inside the image")
    if reflectance <= 0:
        raise CalibrationError("reflectance must be positive")

    ys, xs = np.mgrid[0:height, 0:width]
    px, py = xs + 0.5, ys + 0.5
    inside = (px - cx) ** 2 + (py - cy) ** 2 < radius ** 2
    lum = img.mean(axis=2)
    vals = lum[inside]
    if vals.size == 0:
        raise CalibrationError("sphere disc contains no pixels")
    k = max(1, int(np.ceil(top_fraction * vals.size)))
    order = np.argsort(vals, kind="stable")[::-1]
    cutoff = vals[order[k - 1]]
    if cutoff == vals.min() and vals.max() == vals.min():
        raise CalibrationError("disc is uniformly saturated; highlight is not unique")
    sel = np.zeros(vals.size, dtype=bool)
    sel[order[:k]] = True
    w = vals[sel]
    if w.sum() <= 0:
        raise CalibrationError("no positive radiance in the sphere disc")
    hx = float(np.sum(px[inside][sel] * w) / w.sum())
    hy = float(np.sum(py[inside][sel] * w) / w.sum())

    nx = (hx - cx) / radius
    ny = -(hy - cy) / radius
    rr = nx * nx + ny * ny
    if rr >= 1.0:
        raise CalibrationError("highlight centroid lies outside the sphere disc")
    n = np.array([nx, ny, np.sqrt(1.0 - rr)])
    v = np.array([0.0, 0.0, 1.0])
    direction = 2.0 * np.dot(n, v) * n - v
    intensity = img.reshape(-1, img.shape[2])[inside.ravel()][sel].mean(axis=0) / reflectance
    intensity = np.broadcast_to(intensity, (3,))
    return DirectionalLight(direction, intensity)
