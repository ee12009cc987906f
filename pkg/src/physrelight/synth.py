"""Synthetic one-light-at-a-time oracle.

Scenes are ellipsoids in front of an optional backdrop plane, seen by an
orthographic camera looking down -z. Each frame is lit by a single
directional light; cast shadows come from exact shadow-ray intersection and
non-diffuse light from a Phong lobe. Every frame is exported together with
its exact albedo, normals, shading, visibility and residual layers.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import formation
from .imageio import save_pfm
from .lighting import DirectionalLight, LightSet, save_lights, standard_rig

__all__ = [
    "Material",
    "Ellipsoid",
    "Plane",
    "Camera",
    "SceneSpec",
    "IntrinsicSet",
    "Geometry",
    "build_scene",
    "mirror_scene",
    "trace_primary",
    "render_olat",
    "render_stack",
    "generate_dataset",
    "LAYERS",
]

SHADOW_OFFSET = 1e-4
LAYERS = ("image", "albedo", "normals", "shading", "visibility", "residual")


@dataclass(frozen=True)
class Material:
    """Procedural albedo plus a Phong lobe.

    ``texture`` is ``"constant"``, ``"gradient"`` or ``"checker"``. Texture
    coordinates are ``tex_matrix @ (x - origin)`` so mirrored scenes keep the
    same pattern.
    """

    texture: str
    color0: tuple
    color1: tuple = (0.0, 0.0, 0.0)
    scale: float = 0.2
    tex_matrix: tuple = ((1.0, 0.0, 0.0), (0.0, 1.0, 0.0), (0.0, 0.0, 1.0))
    k_s: float = 0.0
    alpha: float = 16.0

    def __post_init__(self):
        if self.texture not in ("constant", "gradient", "checker"):
            raise ValueError(f"unknown texture {self.texture!r}")
        for c in (self.color0, self.color1):
            if min(c) < 0 or max(c) > 1:
                raise ValueError("albedo colors must lie in [0, 1]")
        if self.k_s < 0 or self.alpha < 1:
            raise ValueError("need k_s >= 0 and alpha >= 1")

    def albedo(self, points, origin):
        """Albedo at world ``points`` (..., 3)."""
        c0 = np.asarray(self.color0, dtype=np.float64)
        c1 = np.asarray(self.color1, dtype=np.float64)
        if self.texture == "constant":
            return np.broadcast_to(c0, points.shape).copy()
        uvw = (points - np.asarray(origin)) @ np.asarray(self.tex_matrix).T
        if self.texture == "gradient":
            t = np.clip(uvw[..., :1] / self.scale + 0.5, 0.0, 1.0)
            return c0 + (c1 - c0) * t
        cells = np.floor(uvw / self.scale).astype(np.int64).sum(axis=-1, keepdims=True)
        return np.where(cells % 2 == 0, c0, c1)


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple
    radii: tuple
    rotation: tuple  # 3x3 row-major, columns are the local axes in world space
    material: Material


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    material: Material


@dataclass(frozen=True)
class Camera:
    width: int = 128
    height: int = 128
    pixel_scale: float = 2.0 / 128

    def pixel_centers(self):
        """World (x, y) of every pixel center, each ``(H, W)``."""
        j = np.arange(self.width, dtype=np.float64)
        i = np.arange(self.height, dtype=np.float64)
        x = (j + 0.5 - self.width / 2.0) * self.pixel_scale
        y = (self.height / 2.0 - i - 0.5) * self.pixel_scale
        return np.meshgrid(x, y)


@dataclass(frozen=True)
class SceneSpec:
    primitives: tuple
    plane: Optional[Plane] = None
    camera: Camera = field(default_factory=Camera)
    seed: int = 0

    def __post_init__(self):
        if not self.primitives and self.plane is None:
            raise ValueError("scene needs at least one primitive")


@dataclass
class IntrinsicSet:
    """One rendered frame and its intrinsic layers, all ``(H, W, C)`` float32."""

    image: np.ndarray
    albedo: np.ndarray
    normals: np.ndarray
    shading: np.ndarray
    visibility: np.ndarray
    residual: np.ndarray
    light: DirectionalLight

    def layers(self):
        return {name: getattr(self, name) for name in LAYERS}

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class Geometry:
    """Light-independent primary-ray results for a scene."""

    hit: np.ndarray  # (H, W) bool
    points: np.ndarray  # (H, W, 3)
    normals: np.ndarray  # (H, W, 3), zero on background
    albedo: np.ndarray  # (H, W, 3)
    k_s: np.ndarray  # (H, W)
    alpha: np.ndarray  # (H, W)


def _rot(rows):
    return np.asarray(rows, dtype=np.float64)


def _ellipsoid_t(origin, direction, prim):
    """Nearest positive hit distance of rays with an ellipsoid (inf on miss)."""
    R = _rot(prim.rotation)
    radii = np.asarray(prim.radii, dtype=np.float64)
    c = np.asarray(prim.center, dtype=np.float64)
    o = ((origin - c) @ R) / radii
    d = (direction @ R) / radii
    a = np.sum(d * d, axis=-1)
    b = np.sum(o * d, axis=-1)
    cc = np.sum(o * o, axis=-1) - 1.0
    disc = b * b - a * cc
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t0 = (-b - sq) / a
    t1 = (-b + sq) / a
    t = np.where(t0 > 0, t0, t1)
    return np.where(ok & (t > 0), t, np.inf)


def _ellipsoid_normal(points, prim):
    R = _rot(prim.rotation)
    radii = np.asarray(prim.radii, dtype=np.float64)
    q = (points - np.asarray(prim.center)) @ R
    n = (q / radii ** 2) @ R.T
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def _plane_t(origin, direction, plane):
    n = np.asarray(plane.normal, dtype=np.float64)
    p0 = np.asarray(plane.point, dtype=np.float64)
    denom = direction @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((p0 - origin) @ n) / denom
    return np.where(np.isfinite(t) & (t > 0), t, np.inf)


def _surfaces(scene):
    out = list(scene.primitives)
    if scene.plane is not None:
        out.append(scene.plane)
    return out


def _hit_t(origin, direction, surf):
    if isinstance(surf, Plane):
        return _plane_t(origin, direction, surf)
    return _ellipsoid_t(origin, direction, surf)


def trace_primary(scene):
    cam = scene.camera
    x, y = cam.pixel_centers()
    origin = np.stack([x, y, np.full_like(x, 100.0)], axis=-1)
    direction = np.broadcast_to(np.array([0.0, 0.0, -1.0]), origin.shape)
    surfs = _surfaces(scene)
    ts = np.stack([_hit_t(origin, direction, s) for s in surfs])
    idx = np.argmin(ts, axis=0)
    tmin = np.min(ts, axis=0)
    hit = np.isfinite(tmin)
    points = origin + direction * np.where(hit, tmin, 0.0)[..., None]

    normals = np.zeros(origin.shape)
    albedo = np.zeros(origin.shape)
    k_s = np.zeros(hit.shape)
    alpha = np.ones(hit.shape)
    for k, s in enumerate(surfs):
        m = hit & (idx == k)
        if not np.any(m):
            continue
        p = points[m]
        if isinstance(s, Plane):
            n = np.asarray(s.normal, dtype=np.float64)
            normals[m] = n / np.linalg.norm(n)
            albedo[m] = s.material.albedo(p, s.point)
        else:
            normals[m] = _ellipsoid_normal(p, s)
            albedo[m] = s.material.albedo(p, s.center)
        k_s[m] = s.material.k_s
        alpha[m] = s.material.alpha
    return Geometry(hit, points, normals, albedo, k_s, alpha)


def _visibility(scene, geom, light):
    l = light.direction
    origin = geom.points + SHADOW_OFFSET * geom.normals
    direction = np.broadcast_to(l, origin.shape)
    blocked = np.zeros(geom.hit.shape, dtype=bool)
    for s in _surfaces(scene):
        blocked |= np.isfinite(_hit_t(origin, direction, s))
    return geom.hit & ~blocked


def render_olat(scene, light, geometry=None):
    """Render ``scene`` under one directional light with all intrinsic layers."""
    geom = geometry if geometry is not None else trace_primary(scene)
    f32 = np.float32
    albedo = geom.albedo.astype(f32)
    normals = geom.normals.astype(f32)
    vis = _visibility(scene, geom, light)[..., None].astype(f32)

    shade = formation.shading(normals, light)
    n = geom.normals
    cos = n @ light.direction
    refl_v = 2.0 * cos * n[..., 2] - light.direction[2]
    lobe = np.where(
        geom.hit & (cos > 0),
        np.power(np.maximum(refl_v, 0.0), geom.alpha),
        0.0,
    )
    residual = (geom.k_s * lobe)[..., None] * light.intensity
    residual = residual.astype(f32)
    image = formation.compose(formation.diffuse_render(albedo, shade), residual, vis)
    return IntrinsicSet(image, albedo, normals, shade, vis, residual, light)


def render_stack(scene, lights):
    geom = trace_primary(scene)
    return [render_olat(scene, l, geom) for l in lights]


def mirror_scene(scene, axis):
    """Mirror a scene about the x = 0 (``"h"``) or y = 0 (``"v"``) plane."""
    k = {"h": 0, "horizontal": 0, "v": 1, "vertical": 1}[axis]
    F = np.eye(3)
    F[k, k] = -1.0

    def mvec(v):
        return tuple(F @ np.asarray(v, dtype=np.float64))

    def mmat(mat):
        return tuple(map(tuple, np.asarray(mat) @ F))

    def mrot(mat):
        return tuple(map(tuple, F @ np.asarray(mat) @ F))

    def mmat_(mat):
        return replace(mat, tex_matrix=mmat(mat.tex_matrix))

    prims = tuple(
        replace(
            p,
            center=mvec(p.center),
            rotation=mrot(p.rotation),
            material=mmat_(p.material),
        )
        for p in scene.primitives
    )
    plane = None
    if scene.plane is not None:
        plane = replace(
            scene.plane,
            point=mvec(scene.plane.point),
            normal=mvec(scene.plane.normal),
            material=mmat_(scene.plane.material),
        )
    return replace(scene, primitives=prims, plane=plane)


def _random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return (
        (1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)),
        (2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)),
        (2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)),
    )


def _random_material(rng, shiny_prob=0.7):
    kind = rng.choice(["constant", "gradient", "checker"], p=[0.4, 0.3, 0.3])
    c0 = tuple(float(v) for v in rng.uniform(0.25, 0.9, size=3))
    c1 = tuple(float(v) for v in rng.uniform(0.15, 0.9, size=3))
    if rng.random() < shiny_prob:
        k_s, alpha = float(rng.uniform(0.2, 0.6)), float(rng.uniform(8.0, 48.0))
    else:
        k_s, alpha = 0.0, 1.0
    return Material(
        texture=str(kind),
        color0=c0,
        color1=c1,
        scale=float(rng.uniform(0.12, 0.3)),
        tex_matrix=_random_rotation(rng),
        k_s=k_s,
        alpha=alpha,
    )


def _has_cast_shadow(scene, lights):
    geom = trace_primary(scene)
    for light in lights:
        vis = _visibility(scene, geom, light)
        cos = geom.normals @ light.direction
        if np.any(geom.hit & ~vis & (cos > 1e-3)):
            return True
    return False


def build_scene(seed, resolution=128, lambertian=False):
    """Deterministic pseudo-random scene with 2-5 primitives.

    At least one primitive casts a shadow onto another surface for some
    light of the standard rig. ``lambertian=True`` zeroes every specular lobe.
    """
    rng = np.random.default_rng(seed)
    rig = standard_rig()
    cam = Camera(resolution, resolution, 2.0 / resolution)
    for _ in range(50):
        plane = None
        with_plane = rng.random() < 0.75
        # without a backdrop one extra occluder is appended below
        n_prims = int(rng.integers(2, 6)) if with_plane else int(rng.integers(1, 5))
        if with_plane:
            tilt = rng.normal(scale=0.15, size=2)
            normal = np.array([tilt[0], tilt[1], 1.0])
            normal /= np.linalg.norm(normal)
            mat = _random_material(rng, shiny_prob=0.3)
            plane = Plane((0.0, 0.0, -0.5), tuple(normal), mat)
        prims = []
        for k in range(n_prims):
            r = rng.uniform(0.15, 0.35)
            radii = r * rng.uniform(0.7, 1.3, size=3)
            if rng.random() < 0.5:
                radii[:] = r
            cx, cy = rng.uniform(-0.6, 0.6, size=2)
            cz = rng.uniform(-0.2, 0.35)
            if k == 0 and plane is None:
                # keep a large receiver behind the occluders
                radii[:] = 0.55
                cx, cy, cz = rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), -0.6
            prims.append(
                Ellipsoid(
                    (float(cx), float(cy), float(cz)),
                    tuple(float(v) for v in radii),
                    _random_rotation(rng),
                    _random_material(rng),
                )
            )
        if plane is None:
            # one small occluder right in front of the receiver
            cx, cy = prims[0].center[0], prims[0].center[1]
            prims.append(
                Ellipsoid(
                    (float(cx + rng.uniform(-0.2, 0.2)), float(cy + rng.uniform(-0.2, 0.2)), 0.3),
                    (0.15, 0.15, 0.15),
                    _random_rotation(rng),
                    _random_material(rng),
                )
            )
        scene = SceneSpec(tuple(prims), plane, cam, int(seed))
        if lambertian:
            scene = make_lambertian(scene)
        if _has_cast_shadow(scene, rig):
            return scene
    raise RuntimeError(f"could not place a shadow-casting occluder for seed {seed}")


def make_lambertian(scene):
    def flat(m):
        return replace(m, k_s=0.0)

    prims = tuple(replace(p, material=flat(p.material)) for p in scene.primitives)
    plane = None if scene.plane is None else replace(scene.plane, material=flat(scene.plane.material))
    return replace(scene, primitives=prims, plane=plane)


def generate_dataset(n_scenes, light_set=None, out_dir=".", seeds=None, resolution=128,
                     lambertian=False, pool=None):
    """Render ``n_scenes`` scenes under every light and write PFMs plus a manifest.

    Returns the manifest path. ``pool`` is an optional executor used to
    render scenes concurrently; the manifest is assembled in seed order.
    """
    from .dataset import write_manifest

    light_set = light_set if light_set is not None else standard_rig()
    seeds = list(seeds) if seeds is not None else list(range(n_scenes))
    if len(seeds) != n_scenes:
        raise ValueError("need one seed per scene")
    os.makedirs(out_dir, exist_ok=True)
    light_file = "lights.txt"
    save_lights(light_set, os.path.join(out_dir, light_file))

    def one(seed):
        scene = build_scene(seed, resolution=resolution, lambertian=lambertian)
        sdir = f"scene_{seed:05d}"
        os.makedirs(os.path.join(out_dir, sdir), exist_ok=True)
        geom = trace_primary(scene)
        frames = []
        for lid, light in zip(light_set.ids, light_set.lights):
            sample = render_olat(scene, light, geom)
            files = {}
            for name, raster in sample.layers().items():
                rel = f"{sdir}/l{lid:03d}_{name}.pfm"
                save_pfm(raster, os.path.join(out_dir, rel))
                files[name] = rel
            frames.append({"light_id": int(lid), "files": files})
        return {"scene_seed": int(seed), "light_file": light_file, "frames": frames}

    mapper = pool.map if pool is not None else map
    scenes = list(mapper(one, seeds))
    manifest = {
        "format": "physrelight-manifest/1",
        "kind": "oracle",
        "light_file": light_file,
        "resolution": [resolution, resolution],
        "scenes": scenes,
    }
    path = os.path.join(out_dir, "manifest.json")
    write_manifest(manifest, path)
    return path
