"""Finite-difference audits of the autodiff engine in 64-bit precision.

Relative error is ``|g - fd| / max(|g|, |fd|, floor)``. Perturbations whose
forward passes take a different branch of any nonsmooth op (leaky ReLU, the
shading clamp, L1) than the unperturbed pass are skipped, and so are entries
whose perturbation moves a shading cosine to within ``boundary`` of zero.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import formation
from ..lighting import DirectionalLight
from . import autodiff as ad
from .model import ModelParams, TrainConfig, generator_forward, to_network_range
from .train import loss_terms

__all__ = ["CheckEntry", "GradReport", "check_function", "check_op", "check_full_graph"]


@dataclass
class CheckEntry:
    name: str
    index: tuple
    analytic: float
    numeric: float
    rel_error: float
    skipped: str = ""


@dataclass
class GradReport:
    tolerance: float
    entries: list = field(default_factory=list)

    @property
    def checked(self):
        return [e for e in self.entries if not e.skipped]

    @property
    def max_rel_error(self):
        errs = [e.rel_error for e in self.checked]
        return max(errs) if errs else 0.0

    @property
    def failures(self):
        return [e for e in self.checked if e.rel_error >= self.tolerance]

    @property
    def passed(self):
        return bool(self.checked) and not self.failures

    def lines(self):
        out = [
            f"checked {len(self.checked)} skipped {len(self.entries) - len(self.checked)} "
            f"max_rel_error {self.max_rel_error:.3e} tolerance {self.tolerance:.1e} "
            f"{'PASS' if self.passed else 'FAIL'}"
        ]
        for e in self.failures:
            out.append(f"FAIL {e.name}{list(e.index)} analytic {e.analytic:.6e} "
                       f"numeric {e.numeric:.6e} rel {e.rel_error:.3e}")
        return out


def _rel(a, b, floor):
    return abs(a - b) / max(abs(a), abs(b), floor)


def _same_kinks(k0, k1):
    return len(k0) == len(k1) and all(np.array_equal(a, b) for a, b in zip(k0, k1))


def check_function(loss_fn, tensors, samples, rng, h=3e-5, tolerance=1e-5, floor=1e-8,
                   guard=None):
    """Audit ``loss_fn() -> scalar Tensor`` against the leaves in ``tensors``.

    ``tensors`` maps names to float64 leaf Tensors; ``samples`` entries are
    drawn uniformly over all their elements. ``guard`` is an optional
    callable returning a skip reason (or "") for the current state.
    """
    for t in tensors.values():
        t.grad = None
    with ad.record_kinks() as kinks0:
        loss = loss_fn()
    loss.backward()
    grads = {k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
             for k, t in tensors.items()}
    names = list(tensors)
    sizes = np.array([tensors[k].data.size for k in names], dtype=np.float64)
    report = GradReport(tolerance)
    for _ in range(samples):
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        t = tensors[name]
        idx = tuple(int(i) for i in np.unravel_index(rng.integers(t.data.size), t.data.shape))
        orig = t.data[idx]
        vals, skip = [], ""
        for sgn in (1.0, -1.0):
            t.data[idx] = orig + sgn * h
            with ad.record_kinks() as kk:
                vals.append(float(loss_fn().data))
            if not _same_kinks(kinks0, kk):
                skip = "kink"
            if guard is not None and not skip:
                skip = guard()
        t.data[idx] = orig
        numeric = (vals[0] - vals[1]) / (2 * h)
        analytic = float(grads[name][idx])
        report.entries.append(
            CheckEntry(name, idx, analytic, numeric, _rel(analytic, numeric, floor), skip)
        )
    return report


def check_op(op, inputs, rng, samples=60, **kw):
    """Audit an op by projecting its output on a fixed random cotangent."""
    leaves = {f"x{i}": ad.Tensor(np.asarray(x, dtype=np.float64), requires_grad=True)
              for i, x in enumerate(inputs)}
    out_shape = op(*leaves.values()).shape
    cot = rng.normal(size=out_shape)

    def loss_fn():
        y = op(*leaves.values())
        return ad.Tensor(np.sum(y.data * cot), parents=(y,), backward=lambda g: (g * cot,))

    return check_function(loss_fn, leaves, samples, rng, **kw)


def _random_light(rng):
    d = rng.normal(size=3)
    d[2] = abs(d[2]) + 0.5
    return DirectionalLight(d, rng.uniform(0.5, 1.0, size=3))


def check_full_graph(config=None, metric="dssim", size=32, batch=1, samples=200, seed=0,
                     h=1e-4, tolerance=1e-5, boundary=1e-4, include_input=True):
    """Audit parameters (and the input image) through stage 1, the formation
    layers, stage 2 and the training loss, all in float64."""
    rng = np.random.default_rng(seed)
    cfg = config or TrainConfig()
    cfg = cfg.with_loss(metric)
    model = ModelParams(cfg, dtype=np.float64)
    # move off the zero-initialized output layers so every path carries gradient
    for name, t in model.tensors.items():
        t.data = t.data + rng.normal(0.0, 0.05, size=t.data.shape)
    img = rng.uniform(0.05, 0.95, size=(batch, size, size, 3))
    l_src = [_random_light(rng) for _ in range(batch)]
    l_dst = [_random_light(rng) for _ in range(batch)]
    targets = {
        "final": rng.uniform(0, 1, (batch, size, size, 3)),
        "albedo": rng.uniform(0, 1, (batch, size, size, 3)),
        "normals": rng.normal(size=(batch, size, size, 3)),
        "shading": rng.uniform(0, 1, (batch, size, size, 3)),
        "diffuse": rng.uniform(0, 1, (batch, size, size, 3)),
        "residual": rng.normal(0, 0.1, (batch, size, size, 3)),
        "visibility": (rng.uniform(size=(batch, size, size, 1)) > 0.3).astype(np.float64),
    }
    x = ad.Tensor(to_network_range(img), requires_grad=include_input)
    tensors = dict(model.tensors)
    if include_input:
        tensors["input"] = x
    state = {}

    def loss_fn():
        out = generator_forward(model, img, l_src, l_dst, x=x)
        state["normals"] = out["normals"].data
        terms = loss_terms(out, targets, cfg)
        return ad.sum_scalars([v for _, v in terms.values()], [w for w, _ in terms.values()])

    def guard():
        n = state["normals"]
        cos = np.stack([formation.cosine(n[i], l_dst[i]) for i in range(batch)])
        return "boundary" if np.any(np.abs(cos) < boundary) else ""

    return check_function(loss_fn, tensors, samples, rng, h=h, tolerance=tolerance, guard=guard)
