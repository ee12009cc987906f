"""Two-stage physics-guided relighting generator.

Stage 1 maps the source image to albedo and unit normals. Shading under the
target light and the diffuse render come from the formation operators.
Stage 2, conditioned on the image, the stage-1 intrinsics, the diffuse render
and the lights, predicts a signed residual and a soft visibility map, and the
output is ``(diffuse + residual) * visibility``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad

__all__ = [
    "TARGETS",
    "TrainConfig",
    "ModelParams",
    "layer_specs",
    "init_params",
    "stage1_forward",
    "stage2_forward",
    "generator_forward",
    "relight",
    "to_network_range",
]

TARGETS = ("final", "albedo", "normals", "shading", "diffuse", "residual", "visibility")

VIS_BIAS_INIT = 4.0


@dataclass
class TrainConfig:
    losses: dict = field(default_factory=lambda: {t: "dssim" for t in TARGETS if t != "normals"})
    weights: dict = field(default_factory=lambda: {t: 1.0 for t in TARGETS})
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 4
    seed: int = 0
    known_source_illumination: bool = True
    depth: int = 3
    base_channels: int = 16
    slope: float = 0.2
    crop: int = 64
    pairs_per_epoch: int = 0  # 0: one pair per training frame
    flip_aug: bool = True
    scale_aug: bool = True
    jitter_aug: bool = True
    val_pairs: int = 16

    def __post_init__(self):
        losses = {t: "dssim" for t in TARGETS if t != "normals"}
        losses.update(self.losses or {})
        losses.pop("normals", None)
        self.losses = losses
        weights = {t: 1.0 for t in TARGETS}
        weights.update(self.weights or {})
        self.weights = weights
        for t, w in self.weights.items():
            if t not in TARGETS:
                raise ValueError(f"unknown loss target {t!r}")
            if w < 0:
                raise ValueError(f"loss weight for {t} must be nonnegative")
        if self.weights["final"] <= 0:
            raise ValueError("the final-image loss must stay active")
        for t, m in self.losses.items():
            if t not in TARGETS:
                raise ValueError(f"unknown loss target {t!r}")
            if m not in ("l1", "l2", "dssim", "msdssim"):
                raise ValueError(f"unknown loss {m!r} for {t}")
        if self.depth < 2 or self.base_channels < 2 or self.base_channels % 2:
            raise ValueError("need depth >= 2 and an even base channel count")

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def with_loss(self, metric):
        """Copy with every configurable target trained on ``metric``."""
        d = self.to_dict()
        d["losses"] = {t: metric for t in TARGETS if t != "normals"}
        return TrainConfig.from_dict(d)


def _stage_inputs(cfg):
    light_ch = 3 if cfg.known_source_illumination else 0
    stage1 = 3 + light_ch
    # image, albedo, normals, diffuse, target light, optional source light
    stage2 = 3 + 3 + 3 + 3 + 3 + light_ch
    return stage1, stage2


HEADS = {"stage1": (("albedo", 3), ("normals", 3)), "stage2": (("residual", 3), ("visibility", 1))}


def layer_specs(cfg):
    """Ordered ``(name, cin, cout, kind)`` for every conv layer of both stages."""
    specs = []
    in1, in2 = _stage_inputs(cfg)
    for stage, cin in (("stage1", in1), ("stage2", in2)):
        b = cfg.base_channels
        ch = [b * 2 ** l for l in range(cfg.depth)]
        prev = cin
        for l in range(cfg.depth):
            specs.append((f"{stage}.enc{l}a", prev, ch[l], "hidden"))
            specs.append((f"{stage}.enc{l}b", ch[l], ch[l], "hidden"))
            prev = ch[l]
        for l in range(cfg.depth - 2, -1, -1):
            specs.append((f"{stage}.dec{l}a", prev + ch[l], ch[l], "hidden"))
            if l > 0:
                specs.append((f"{stage}.dec{l}b", ch[l], ch[l], "hidden"))
            prev = ch[l]
        heads = HEADS[stage]
        group = b // len(heads)
        for name, out in heads:
            specs.append((f"{stage}.{name}.hid", group, group, "hidden"))
            specs.append((f"{stage}.{name}.out", group, out, f"out:{name}"))
    return specs


def init_params(cfg, seed=None, dtype=np.float32):
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    params = {}
    for name, cin, cout, kind in layer_specs(cfg):
        if kind == "hidden":
            std = np.sqrt(2.0 / ((1 + cfg.slope ** 2) * 9 * cin))
            w = rng.normal(0.0, std, size=(3, 3, cin, cout))
            b = np.zeros(cout)
        else:
            w = np.zeros((3, 3, cin, cout))
            b = np.zeros(cout)
            head = kind.split(":")[1]
            if head == "normals":
                b[2] = 1.0
            elif head == "visibility":
                b[:] = VIS_BIAS_INIT
        params[f"{name}.w"] = w.astype(dtype)
        params[f"{name}.b"] = b.astype(dtype)
    return params


class ModelParams:
    """Learnable weights, config echo and Adam moments."""

    def __init__(self, config, params=None, dtype=np.float32):
        self.config = config
        raw = params if params is not None else init_params(config, dtype=dtype)
        self.tensors = {k: ad.Tensor(np.asarray(v, dtype=dtype), requires_grad=True, name=k)
                        for k, v in raw.items()}
        self.m = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.v = {k: np.zeros_like(t.data) for k, t in self.tensors.items()}
        self.step = 0

    def arrays(self):
        return {k: t.data for k, t in self.tensors.items()}

    def astype(self, dtype):
        return ModelParams(self.config, {k: v.astype(dtype) for k, v in self.arrays().items()},
                           dtype=dtype)

    def zero_grad(self):
        for t in self.tensors.values():
            t.grad = None

    def adam_step(self):
        cfg = self.config
        self.step += 1
        b1, b2 = cfg.beta1, cfg.beta2
        c1 = 1.0 - b1 ** self.step
        c2 = 1.0 - b2 ** self.step
        for k, t in self.tensors.items():
            if t.grad is None:
                continue
            g = t.grad
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            upd = cfg.learning_rate * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + cfg.eps)
            t.data = (t.data - upd).astype(t.data.dtype)
            t.grad = None

    def all_finite(self):
        return all(np.all(np.isfinite(t.data)) for t in self.tensors.values())

    def n_parameters(self):
        return sum(t.data.size for t in self.tensors.values())


def to_network_range(img):
    """[0, 1] -> [-1, 1] after clamping."""
    return 2.0 * np.clip(img, 0.0, 1.0) - 1.0


def _conv(P, name, x, slope=None):
    y = ad.conv2d(x, P[f"{name}.w"], P[f"{name}.b"])
    return ad.leaky_relu(y, slope) if slope is not None else y


def _unet(P, stage, x, cfg):
    s = cfg.slope
    skips = []
    h = x
    for l in range(cfg.depth):
        if l > 0:
            h = ad.avgpool2(h)
        h = _conv(P, f"{stage}.enc{l}a", h, s)
        h = _conv(P, f"{stage}.enc{l}b", h, s)
        skips.append(h)
    for l in range(cfg.depth - 2, -1, -1):
        h = ad.concat([ad.upsample2(h), skips[l]])
        h = _conv(P, f"{stage}.dec{l}a", h, s)
        if l > 0:
            h = _conv(P, f"{stage}.dec{l}b", h, s)
    heads = HEADS[stage]
    group = cfg.base_channels // len(heads)
    out = {}
    for k, (name, _) in enumerate(heads):
        g = ad.channel_slice(h, k * group, (k + 1) * group)
        g = _conv(P, f"{stage}.{name}.hid", g, s)
        out[name] = _conv(P, f"{stage}.{name}.out", g)
    return out


def _light_planes(lights, like):
    return ad.broadcast_const_channels(np.stack([l.encoding() for l in lights]), like)


def _check_size(x, cfg):
    f = 2 ** (cfg.depth - 1)
    h, w = x.shape[1:3]
    if h % f or w % f:
        raise ValueError(f"input {h}x{w} must be divisible by {f}")


def stage1_forward(P, cfg, x, l_src=None):
    """``x`` is the source image already mapped to [-1, 1], as a Tensor."""
    _check_size(x, cfg)
    inputs = [x]
    if cfg.known_source_illumination:
        if l_src is None:
            raise ValueError("model was configured with known source illumination")
        inputs.append(_light_planes(l_src, x))
    h = ad.concat(inputs) if len(inputs) > 1 else x
    heads = _unet(P, "stage1", h, cfg)
    return ad.sigmoid(heads["albedo"]), ad.channel_l2_normalize(heads["normals"])


def stage2_forward(P, cfg, x, albedo, normals, diffuse, l_dst, l_src=None):
    inputs = [x, albedo, normals, diffuse, _light_planes(l_dst, x)]
    if cfg.known_source_illumination:
        inputs.append(_light_planes(l_src, x))
    heads = _unet(P, "stage2", ad.concat(inputs), cfg)
    return heads["residual"], ad.sigmoid(heads["visibility"])


def generator_forward(model, img_src, l_src, l_dst, x=None):
    """Full relighting graph. ``img_src`` is ``(N, H, W, 3)`` in [0, 1];
    ``l_src``/``l_dst`` are per-item light lists. Returns a dict of Tensors."""
    cfg = model.config
    P = model.tensors
    dt = next(iter(P.values())).data.dtype
    if x is None:
        x = ad.Tensor(to_network_range(np.asarray(img_src)).astype(dt))
    if not cfg.known_source_illumination:
        l_src = None
    albedo, normals = stage1_forward(P, cfg, x, l_src)
    shade = ad.shading(normals, l_dst)
    diffuse = ad.mul(albedo, shade)
    residual, visibility = stage2_forward(P, cfg, x, albedo, normals, diffuse, l_dst, l_src)
    output = ad.mul(ad.add(diffuse, residual), visibility)
    return {
        "albedo": albedo,
        "normals": normals,
        "shading": shade,
        "diffuse": diffuse,
        "residual": residual,
        "visibility": visibility,
        "final": output,
        "input": x,
    }


def relight(model, img_src, l_src, l_dst, clamp=True):
    """Relight one ``(H, W, 3)`` image; returns an ``(H, W, 3)`` float32 raster."""
    img = np.asarray(img_src, dtype=np.float32)
    out = generator_forward(model, img[None], [l_src], [l_dst])["final"].data[0]
    out = out.astype(np.float32)
    return np.clip(out, 0.0, 1.0) if clamp else out
