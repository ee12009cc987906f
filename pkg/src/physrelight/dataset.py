"""Dataset manifests (JSON) and in-memory frame stores for training."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass

import jsonschema
import numpy as np

from .imageio import load_pfm
from .lighting import DirectionalLight, load_lights

__all__ = [
    "MANIFEST_SCHEMA",
    "ManifestError",
    "write_manifest",
    "read_manifest",
    "SceneFrames",
    "FrameStore",
]

_FILES = {
    "type": "object",
    "properties": {
        k: {"type": "string"}
        for k in ("image", "albedo", "normals", "shading", "visibility", "residual")
    },
    "required": ["image", "albedo", "normals", "shading", "visibility", "residual"],
}

MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["format", "light_file", "scenes"],
    "properties": {
        "format": {"const": "physrelight-manifest/1"},
        "kind": {"enum": ["oracle", "pms", "augmented"]},
        "light_file": {"type": "string"},
        "resolution": {"type": "array", "items": {"type": "integer"}, "minItems": 2, "maxItems": 2},
        "scenes": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["scene_seed", "light_file", "frames"],
                "properties": {
                    "scene_seed": {"type": "integer"},
                    "light_file": {"type": "string"},
                    "variant": {"type": "string"},
                    "validity": {"type": "string"},
                    "frames": {
                        "type": "array",
                        "minItems": 1,
                        "items": {
                            "type": "object",
                            "required": ["light_id", "files"],
                            "properties": {
                                "light_id": {"type": "integer"},
                                "files": _FILES,
                                "light": {
                                    "type": "array",
                                    "items": {"type": "number"},
                                    "minItems": 6,
                                    "maxItems": 6,
                                },
                            },
                        },
                    },
                },
            },
        },
    },
}


class ManifestError(ValueError):
    pass


def write_manifest(manifest, path):
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ManifestError(f"refusing to write invalid manifest: {exc.message}") from None
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp, path)


def read_manifest(path):
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"{path}: {exc}") from None
    try:
        jsonschema.validate(manifest, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ManifestError(f"{path}: {exc.message}") from None
    return manifest


@dataclass
class SceneFrames:
    """All frames of one scene sharing geometry: light-independent albedo and
    normals plus stacked per-light image, visibility and residual."""

    seed: int
    albedo: np.ndarray  # (H, W, 3)
    normals: np.ndarray  # (H, W, 3)
    lights: list
    images: np.ndarray  # (K, H, W, 3)
    visibility: np.ndarray  # (K, H, W, 1)
    residual: np.ndarray  # (K, H, W, 3)

    def __len__(self):
        return len(self.lights)


class FrameStore:
    """Scenes available for sampling relighting pairs."""

    def __init__(self, scenes):
        if not scenes:
            raise ValueError("frame store is empty")
        self.scenes = list(scenes)

    def __len__(self):
        return len(self.scenes)

    @property
    def n_frames(self):
        return sum(len(s) for s in self.scenes)

    def split(self, n_val):
        """Hold out the last ``n_val`` scenes."""
        if not 0 < n_val < len(self.scenes):
            raise ValueError("validation split must leave scenes on both sides")
        return FrameStore(self.scenes[:-n_val]), FrameStore(self.scenes[-n_val:])

    @classmethod
    def from_samples(cls, groups):
        """Build from ``[(seed, [IntrinsicSet, ...]), ...]``."""
        scenes = []
        for seed, samples in groups:
            scenes.append(
                SceneFrames(
                    seed=int(seed),
                    albedo=samples[0].albedo,
                    normals=samples[0].normals,
                    lights=[s.light for s in samples],
                    images=np.stack([s.image for s in samples]),
                    visibility=np.stack([s.visibility for s in samples]),
                    residual=np.stack([s.residual for s in samples]),
                )
            )
        return cls(scenes)

    @classmethod
    def from_scenes(cls, scenes, light_set):
        from .synth import render_stack

        return cls.from_samples((sc.seed, render_stack(sc, light_set)) for sc in scenes)

    @classmethod
    def from_manifest(cls, path):
        manifest = read_manifest(path)
        root = os.path.dirname(os.path.abspath(path))
        light_sets = {}
        scenes = []
        for entry in manifest["scenes"]:
            lf = entry["light_file"]
            if lf not in light_sets:
                light_sets[lf] = load_lights(os.path.join(root, lf))
            lset = light_sets[lf]
            lights, images, vis, res = [], [], [], []
            first = entry["frames"][0]["files"]
            albedo = load_pfm(os.path.join(root, first["albedo"]))
            normals = load_pfm(os.path.join(root, first["normals"]))
            for fr in entry["frames"]:
                if "light" in fr:
                    vals = fr["light"]
                    lights.append(DirectionalLight(vals[:3], vals[3:]))
                else:
                    lights.append(lset.by_id(fr["light_id"]))
                f = fr["files"]
                images.append(load_pfm(os.path.join(root, f["image"])))
                vis.append(load_pfm(os.path.join(root, f["visibility"])))
                res.append(load_pfm(os.path.join(root, f["residual"])))
            scenes.append(
                SceneFrames(
                    int(entry["scene_seed"]),
                    albedo,
                    normals,
                    lights,
                    np.stack(images),
                    np.stack(vis),
                    np.stack(res),
                )
            )
        return cls(scenes)
