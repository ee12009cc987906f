"""Relighting evaluation on held-out scenes.

Predictions are compared to the ground-truth target frame after clamping
both to [0, 1]. The diffuse baseline renders ``A * S`` from photometric
stereo applied to the scene's full light stack.
"""
from __future__ import annotations

import numpy as np

from . import formation, metrics, pms

__all__ = ["DiffuseBaseline", "pms_baselines", "predict_pairs", "score_pairs"]


class DiffuseBaseline:
    """Relighter that ignores the source image and renders ``A * S(l_dst)``."""

    def __init__(self, albedo, normals):
        self.albedo = np.asarray(albedo, dtype=np.float32)
        self.normals = np.asarray(normals, dtype=np.float32)

    @classmethod
    def from_stack(cls, images, lights, thresholds=pms.Thresholds()):
        albedo, normals, _ = pms.solve_image(list(images), list(lights), thresholds)
        return cls(albedo, normals)

    def relight(self, img_src, l_src, l_dst, clamp=True):
        out = formation.relight_diffuse(self.albedo, self.normals, l_dst).astype(np.float32)
        return np.clip(out, 0.0, 1.0) if clamp else out


def pms_baselines(store):
    return [DiffuseBaseline.from_stack(sc.images, sc.lights) for sc in store.scenes]


def predict_pairs(relighters, store, pairs, batch_size=8):
    """Unclamped predictions for ``(scene, k_src, k_dst)`` pairs.

    ``relighters`` is either one model (``ModelParams``) used for every scene
    or a list with one relighter object per scene.
    """
    from .learner.model import generator_forward

    preds = []
    if isinstance(relighters, (list, tuple)):
        for si, ks, kd in pairs:
            sc = store.scenes[si]
            preds.append(relighters[si].relight(sc.images[ks], sc.lights[ks], sc.lights[kd],
                                                clamp=False))
        return preds
    model = relighters
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        img = np.stack([store.scenes[si].images[ks] for si, ks, _ in chunk])
        l_src = [store.scenes[si].lights[ks] for si, ks, _ in chunk]
        l_dst = [store.scenes[si].lights[kd] for si, _, kd in chunk]
        out = generator_forward(model, img, l_src, l_dst)["final"].data
        preds.extend(np.asarray(o, dtype=np.float32) for o in out)
    return preds


def score_pairs(relighters, store, pairs, metric="dssim", batch_size=8):
    """Mean of ``metric(clamp(prediction), clamp(target))`` over the pairs."""
    preds = predict_pairs(relighters, store, pairs, batch_size)
    vals = [
        metrics.evaluate(metric, p, store.scenes[si].images[kd])
        for p, (si, _, kd) in zip(preds, pairs)
    ]
    return float(np.mean(vals))
