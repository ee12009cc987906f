"""A small reverse-mode autodiff engine over numpy arrays.

Tensors are channel-last ``(N, H, W, C)``. Each op returns a new
:class:`Tensor` holding references to its inputs and a closure that maps the
output gradient to input gradients. :meth:`Tensor.backward` runs the closures
in reverse topological order.

Nonsmooth ops (leaky ReLU, the shading clamp, L1) report their branch masks
to an optional recorder so gradient checks can skip perturbations that cross
a kink.
"""
from __future__ import annotations

import contextlib

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import formation
from .. import metrics as _metrics

__all__ = [
    "Tensor",
    "record_kinks",
    "constant",
    "add",
    "sub",
    "mul",
    "scale",
    "conv2d",
    "avgpool2",
    "upsample2",
    "concat",
    "channel_slice",
    "leaky_relu",
    "sigmoid",
    "channel_l2_normalize",
    "broadcast_const_channels",
    "shading",
    "metric_loss",
    "sum_scalars",
]

_kinks = None


@contextlib.contextmanager
def record_kinks():
    """Collect the branch masks of nonsmooth ops evaluated inside the block."""
    global _kinks
    prev, _kinks = _kinks, []
    try:
        yield _kinks
    finally:
        _kinks = prev


def _record(mask):
    if _kinks is not None:
        _kinks.append(np.asarray(mask, dtype=bool).copy())


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, name={self.name})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if g is None:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad=None):
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order, seen = [], set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self._accum(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                grads = node._backward(node.grad)
                for p, g in zip(node._parents, grads):
                    if p.requires_grad:
                        p._accum(g)
                # intermediate gradients are not needed after propagation
                if node._parents:
                    node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


def constant(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def add(a, b):
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return Tensor(
        a.data + b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
    )


def sub(a, b):
    a, b = constant(a), constant(b)
    sa, sb = a.shape, b.shape
    return Tensor(
        a.data - b.data,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)),
    )


def mul(a, b):
    a, b = constant(a), constant(b)
    ad, bd = a.data, b.data
    return Tensor(
        ad * bd,
        parents=(a, b),
        backward=lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def scale(a, s):
    return Tensor(a.data * s, parents=(a,), backward=lambda g: (g * s,))


def _im2col(xp, h, w):
    """Patches of a padded ``(N, H+2, W+2, C)`` array as ``(N*H*W, 9*C)``, ordered (di, dj, c)."""
    n, _, _, c = xp.shape
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (N, H, W, C, 3, 3)
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(n * h * w, 9 * c)


def _pad1(x):
    return np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))


def conv2d(x, w, b=None):
    """3x3 convolution, stride 1, zero padding 1.

    ``x`` is ``(N, H, W, Cin)``, ``w`` is ``(3, 3, Cin, Cout)``, ``b`` is ``(Cout,)``.
    """
    n, h, wd, cin = x.shape
    if w.shape[:3] != (3, 3, cin):
        raise ValueError(f"conv2d: kernel {w.shape} does not match input channels {cin}")
    cout = w.shape[3]
    cols = _im2col(_pad1(x.data), h, wd)
    wm = w.data.reshape(9 * cin, cout)
    out = cols @ wm
    if b is not None:
        out += b.data
    out = out.reshape(n, h, wd, cout)

    def backward(g):
        gm = g.reshape(-1, cout)
        gw = (cols.T @ gm).reshape(w.shape) if w.requires_grad else None
        gb = gm.sum(axis=0) if b is not None and b.requires_grad else None
        gx = None
        if x.requires_grad:
            # input gradient is the correlation of g with the flipped, transposed kernel
            wt = np.ascontiguousarray(w.data[::-1, ::-1].transpose(0, 1, 3, 2))
            gx = (_im2col(_pad1(g), h, wd) @ wt.reshape(9 * cout, cin)).reshape(n, h, wd, cin)
        return (gx, gw, gb)

    parents = (x, w) if b is None else (x, w, b)
    return Tensor(out, parents=parents, backward=backward)


def avgpool2(x):
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ValueError(f"avgpool2 needs even spatial size, got {h}x{w}")
    out = x.data.reshape(n, h // 2, 2, w // 2, 2, c).mean(axis=(2, 4))

    def backward(g):
        gx = np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) * 0.25
        return (gx,)

    return Tensor(out, parents=(x,), backward=backward)


def upsample2(x):
    n, h, w, c = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def backward(g):
        return (g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)),)

    return Tensor(out, parents=(x,), backward=backward)


def concat(tensors):
    tensors = [constant(t) for t in tensors]
    sizes = [t.shape[-1] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(tensors)))

    return Tensor(
        np.concatenate([t.data for t in tensors], axis=-1),
        parents=tuple(tensors),
        backward=backward,
    )


def channel_slice(x, start, stop):
    c = x.shape[-1]

    def backward(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        gx[..., start:stop] = g
        return (gx,)

    if not 0 <= start < stop <= c:
        raise ValueError(f"bad channel slice {start}:{stop} of {c}")
    return Tensor(x.data[..., start:stop], parents=(x,), backward=backward)


def leaky_relu(x, slope=0.2):
    pos = x.data > 0
    _record(pos)
    factor = np.where(pos, 1.0, slope).astype(x.data.dtype)
    return Tensor(x.data * factor, parents=(x,), backward=lambda g: (g * factor,))


def sigmoid(x):
    s = 0.5 * (1.0 + np.tanh(0.5 * x.data))
    return Tensor(s, parents=(x,), backward=lambda g: (g * s * (1.0 - s),))


def channel_l2_normalize(x, eps=1e-12):
    """Scale every pixel's channel vector to unit length."""
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True) + eps)
    y = x.data / norm

    def backward(g):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        return ((g - y * dot) / norm,)

    return Tensor(y, parents=(x,), backward=backward)


def broadcast_const_channels(values, like):
    """Constant planes: ``values`` is ``(N, K)`` or ``(K,)``; output ``like.shape[:3] + (K,)``."""
    v = np.asarray(values, dtype=like.data.dtype)
    n, h, w = like.shape[:3]
    if v.ndim == 1:
        v = np.broadcast_to(v, (n, v.shape[0]))
    out = np.broadcast_to(v[:, None, None, :], (n, h, w, v.shape[1])).copy()
    return Tensor(out)


def shading(normals, lights):
    """Differentiable wrapper of :func:`formation.shading`, one light per batch item."""
    data = normals.data
    parts = [formation.shading(data[i], lights[i]) for i in range(data.shape[0])]
    _record(np.stack([formation.cosine(data[i], lights[i]) > 0 for i in range(data.shape[0])]))
    out = np.stack(parts).astype(data.dtype)

    def backward(g):
        return (
            np.stack(
                [formation.shading_vjp(data[i], lights[i], g[i]) for i in range(data.shape[0])]
            ).astype(data.dtype),
        )

    return Tensor(out, parents=(normals,), backward=backward)


def metric_loss(pred, target, metric):
    """Scalar loss ``metric(pred, target)`` on unclamped predictions."""
    tgt = target.data if isinstance(target, Tensor) else np.asarray(target)
    tgt = tgt.astype(pred.data.dtype, copy=False)
    if metric == "l1":
        _record(pred.data > tgt)
    value, g = _metrics.value_and_grad(metric, pred.data, tgt, clamp=False)
    g = g.astype(pred.data.dtype, copy=False)
    return Tensor(
        np.asarray(value, dtype=pred.data.dtype),
        parents=(pred,),
        backward=lambda up: (g * up,),
    )


def sum_scalars(terms, weights=None):
    terms = list(terms)
    weights = [1.0] * len(terms) if weights is None else list(weights)
    total = sum(float(w) * t.data for w, t in zip(weights, terms))
    dt = terms[0].data.dtype
    return Tensor(
        np.asarray(total, dtype=dt),
        parents=tuple(terms),
        backward=lambda g: tuple(g * w for w in weights),
    )
