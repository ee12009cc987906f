"""Mini-batch training of the relighting generator on relighting pairs.

A pair is two frames of the same scene: the source image with its light and
a target light whose frame supplies every supervision target. Flips, the
intensity scale and the crop window are shared by both frames of a pair;
calibration jitter only perturbs the lights handed to the network.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .. import augment
from .. import formation
from . import autodiff as ad
from .model import TARGETS, ModelParams, generator_forward

__all__ = [
    "TrainingDiverged",
    "Batch",
    "History",
    "make_batch",
    "fixed_pairs",
    "pair_batch",
    "loss_terms",
    "total_loss",
    "train",
]

DSSIM_FAMILY = ("dssim", "msdssim")
RESIDUAL_SHIFT = 0.5


class TrainingDiverged(RuntimeError):
    """Raised when a loss or parameter becomes non-finite."""


@dataclass
class Batch:
    image: np.ndarray  # (N, H, W, 3) source images
    l_src: list  # lights given to the network
    l_dst: list
    targets: dict  # name -> (N, H, W, C)


@dataclass
class History:
    train: list = field(default_factory=list)
    val: list = field(default_factory=list)
    per_target: list = field(default_factory=list)
    seconds: list = field(default_factory=list)

    def to_dict(self):
        return {"train": self.train, "val": self.val, "per_target": self.per_target,
                "seconds": self.seconds}


def _targets(scene, k_dst, light_dst, sl, flips, s):
    """Supervision for target frame ``k_dst`` after crop ``sl``, ``flips`` and scale ``s``."""
    albedo = scene.albedo[sl]
    normals = scene.normals[sl]
    image = scene.images[k_dst][sl] * s
    vis = scene.visibility[k_dst][sl]
    res = scene.residual[k_dst][sl] * s
    for axis in flips:
        ax = -2 if axis == "h" else -3
        albedo, image, vis, res = (np.flip(a, axis=ax) for a in (albedo, image, vis, res))
        normals = augment.flip_normals(normals, axis)
    shade = formation.shading(normals, light_dst)
    return {
        "final": image,
        "albedo": albedo,
        "normals": normals,
        "shading": shade,
        "diffuse": formation.diffuse_render(albedo, shade),
        "residual": res,
        "visibility": vis,
    }


def pair_batch(store, pairs, rng=None, cfg=None, train_aug=False):
    """Assemble a batch from ``(scene_index, k_src, k_dst)`` triples.

    With ``train_aug`` the config's crop, flips, scale and jitter are drawn
    from ``rng``; otherwise full frames are used unchanged.
    """
    images, l_src, l_dst = [], [], []
    targets = {t: [] for t in TARGETS}
    for si, ks, kd in pairs:
        scene = store.scenes[si]
        h, w = scene.images.shape[1:3]
        flips, s = (), 1.0
        sl = (slice(None), slice(None))
        if train_aug:
            if cfg.crop and cfg.crop < min(h, w):
                y0, x0 = augment.crop_window(h, w, cfg.crop, cfg.crop, rng)
                sl = (slice(y0, y0 + cfg.crop), slice(x0, x0 + cfg.crop))
            if cfg.flip_aug:
                flips = augment.FLIP_SETS[int(rng.integers(4))]
            if cfg.scale_aug:
                s = augment.draw_scale(rng)
        ls, ld = scene.lights[ks], scene.lights[kd]
        for axis in flips:
            ls, ld = augment.flip_light(ls, axis), augment.flip_light(ld, axis)
        ls, ld = ls.scaled(s), ld.scaled(s)
        src = scene.images[ks][sl] * s
        for axis in flips:
            src = np.flip(src, axis=-2 if axis == "h" else -3)
        for name, arr in _targets(scene, kd, ld, sl, flips, s).items():
            targets[name].append(arr)
        if train_aug and cfg.jitter_aug:
            ls, ld = augment.jitter_light(ls, rng), augment.jitter_light(ld, rng)
        images.append(src)
        l_src.append(ls)
        l_dst.append(ld)
    return Batch(
        image=np.stack(images).astype(np.float32),
        l_src=l_src,
        l_dst=l_dst,
        targets={k: np.stack(v).astype(np.float32) for k, v in targets.items()},
    )


def epoch_pairs(store, rng, cfg):
    """One source frame per training frame (or ``pairs_per_epoch`` draws), each
    with a uniformly drawn target light of the same scene."""
    frames = [(si, k) for si, sc in enumerate(store.scenes) for k in range(len(sc))]
    n = cfg.pairs_per_epoch or len(frames)
    order = rng.permutation(len(frames))
    if n > len(frames):
        order = np.concatenate([order, rng.integers(0, len(frames), n - len(frames))])
    out = []
    for idx in order[:n]:
        si, ks = frames[idx]
        kd = int(rng.integers(len(store.scenes[si])))
        out.append((si, ks, kd))
    return out


def fixed_pairs(store, n_pairs, seed=0):
    """Deterministic evaluation pairs spread evenly over the scenes."""
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n_pairs):
        si = i % len(store.scenes)
        k = len(store.scenes[si])
        ks, kd = rng.choice(k, size=2, replace=k < 2)
        pairs.append((si, int(ks), int(kd)))
    return pairs


def make_batch(store, rng, cfg, n):
    pairs = epoch_pairs(store, rng, cfg)[:n]
    return pair_batch(store, pairs, rng, cfg, train_aug=True)


def loss_terms(outputs, targets, cfg):
    """Weighted per-target losses as ``{name: (weight, Tensor)}``."""
    terms = {}
    for t in TARGETS:
        w = cfg.weights.get(t, 0.0)
        if w <= 0:
            continue
        pred = outputs[t]
        tgt = targets[t]
        if t == "normals":
            metric = "l2"
        else:
            metric = cfg.losses[t]
            if metric in DSSIM_FAMILY:
                if t == "residual":
                    pred = ad.add(pred, RESIDUAL_SHIFT)
                    tgt = tgt + RESIDUAL_SHIFT
                tgt = np.clip(tgt, 0.0, 1.0)
        terms[t] = (w, ad.metric_loss(pred, tgt, metric))
    return terms


def total_loss(outputs, targets, cfg):
    terms = loss_terms(outputs, targets, cfg)
    total = ad.sum_scalars([v for _, v in terms.values()], [w for w, _ in terms.values()])
    return total, {k: float(v.data) for k, (_, v) in terms.items()}


def _forward(model, batch):
    return generator_forward(model, batch.image, batch.l_src, batch.l_dst)


def evaluate_loss(model, store, pairs, batch_size=4):
    if not pairs:
        return float("nan")
    vals = []
    for i in range(0, len(pairs), batch_size):
        chunk = pairs[i:i + batch_size]
        batch = pair_batch(store, chunk)
        total, _ = total_loss(_forward(model, batch), batch.targets, model.config)
        vals.append(float(total.data) * len(chunk))
    return sum(vals) / len(pairs)


def train(config, store, val_store=None, model=None, log=None):
    """Train a generator; returns ``(ModelParams, History)``.

    ``log`` is an optional callable receiving one progress string per epoch.
    Raises :class:`TrainingDiverged` on a non-finite loss or parameter.
    """
    if store is None or len(store) == 0:
        raise ValueError("training store is empty")
    model = model if model is not None else ModelParams(config)
    rng = np.random.default_rng(config.seed)
    val_pairs = fixed_pairs(val_store, config.val_pairs, seed=config.seed) if val_store else []
    hist = History()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        pairs = epoch_pairs(store, rng, config)
        sums, count = {}, 0
        running = 0.0
        for i in range(0, len(pairs), config.batch_size):
            batch = pair_batch(store, pairs[i:i + config.batch_size], rng, config, train_aug=True)
            out = _forward(model, batch)
            total, parts = total_loss(out, batch.targets, config)
            value = float(total.data)
            if not np.isfinite(value):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch + 1}, step {i // config.batch_size + 1}: "
                    + ", ".join(f"{k}={v:.4g}" for k, v in parts.items())
                )
            model.zero_grad()
            total.backward()
            model.adam_step()
            n = len(batch.l_src)
            running += value * n
            count += n
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * n
        if not model.all_finite():
            raise TrainingDiverged(f"non-finite parameters after epoch {epoch + 1}")
        hist.train.append(running / count)
        hist.per_target.append({k: v / count for k, v in sums.items()})
        hist.val.append(evaluate_loss(model, val_store, val_pairs, config.batch_size)
                        if val_pairs else float("nan"))
        hist.seconds.append(time.perf_counter() - t0)
        if log is not None:
            log(f"epoch {epoch + 1}/{config.epochs} train {hist.train[-1]:.5f} "
                f"val {hist.val[-1]:.5f} ({hist.seconds[-1]:.1f}s)")
    return model, hist
