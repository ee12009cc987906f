"""Image losses and metrics with analytic gradients.

All functions accept rasters ``(H, W, C)`` or batches ``(N, H, W, C)``. SSIM
uses an 11x11 Gaussian window (sigma 1.5) in "valid" mode, per channel, with
``C1 = (0.01 L)^2`` and ``C2 = (0.03 L)^2`` for data range ``L = 1``.
MS-SSIM combines the mean contrast-structure term of the finer scales with
the mean SSIM at the coarsest scale, 2x average pooling between scales.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

__all__ = [
    "SSIMParams",
    "METRICS",
    "MS_WEIGHTS",
    "MS_WEIGHTS_PUBLISHED",
    "l1",
    "l2",
    "ssim_map",
    "ssim",
    "dssim",
    "ms_ssim",
    "ms_dssim",
    "evaluate",
    "grad",
    "value_and_grad",
]

# published per-scale exponents; they total 1.0001, so the effective exponents
# are renormalized to sum to exactly 1
MS_WEIGHTS_PUBLISHED = np.array([0.0448, 0.2856, 0.3001, 0.2363, 0.1333])
MS_WEIGHTS = MS_WEIGHTS_PUBLISHED / MS_WEIGHTS_PUBLISHED.sum()
assert abs(MS_WEIGHTS.sum() - 1.0) < 1e-12


@dataclass(frozen=True)
class SSIMParams:
    window: int = 11
    sigma: float = 1.5
    k1: float = 0.01
    k2: float = 0.03
    data_range: float = 1.0

    @property
    def c1(self):
        return (self.k1 * self.data_range) ** 2

    @property
    def c2(self):
        return (self.k2 * self.data_range) ** 2

    def kernel(self):
        r = np.arange(self.window) - (self.window - 1) / 2.0
        g = np.exp(-(r ** 2) / (2.0 * self.sigma ** 2))
        return g / g.sum()


DEFAULT = SSIMParams()


def _prep(a, b, clamp):
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    dt = np.result_type(a.dtype, b.dtype, np.float32)
    a = a.astype(dt, copy=False)
    b = b.astype(dt, copy=False)
    if clamp:
        return np.clip(a, 0, 1), np.clip(b, 0, 1)
    return a, b


def _clamp_mask(a, clamp):
    if not clamp:
        return 1.0
    return ((a >= 0) & (a <= 1)).astype(np.asarray(a).dtype)


def l1(a, b, clamp=True):
    a, b = _prep(a, b, clamp)
    return float(np.mean(np.abs(a - b)))


def l2(a, b, clamp=True):
    a, b = _prep(a, b, clamp)
    return float(np.mean((a - b) ** 2))


def _l1_grad(a, b, clamp):
    ac, bc = _prep(a, b, clamp)
    return np.sign(ac - bc) / ac.size * _clamp_mask(np.asarray(a), clamp)


def _l2_grad(a, b, clamp):
    ac, bc = _prep(a, b, clamp)
    return 2.0 * (ac - bc) / ac.size * _clamp_mask(np.asarray(a), clamp)


# spatial axes of a (..., H, W, C) array
_AX_H, _AX_W = -3, -2


def _filter(x, g):
    """Separable valid-mode correlation over the two spatial axes."""
    half = len(g) // 2
    y = correlate1d(x, g, axis=_AX_H, mode="constant")
    y = correlate1d(y, g, axis=_AX_W, mode="constant")
    h, w = x.shape[_AX_H], x.shape[_AX_W]
    return y[..., half:h - half, half:w - half, :]


def _filter_adjoint(y, g):
    """Adjoint of :func:`_filter`: zero-pad to full size, correlate with the flipped kernel."""
    half = len(g) // 2
    pad = [(0, 0)] * y.ndim
    pad[_AX_H] = (2 * half, 2 * half)
    pad[_AX_W] = (2 * half, 2 * half)
    return _filter(np.pad(y, pad), g[::-1].copy())


def _check_size(x, params):
    h, w = x.shape[_AX_H], x.shape[_AX_W]
    if min(h, w) < params.window:
        raise ValueError(f"image {h}x{w} smaller than the {params.window}px SSIM window")


def _stats(x, y, params):
    g = params.kernel().astype(x.dtype)
    mx, my = _filter(x, g), _filter(y, g)
    sxx = _filter(x * x, g) - mx * mx
    syy = _filter(y * y, g) - my * my
    sxy = _filter(x * y, g) - mx * my
    a1 = 2 * mx * my + params.c1
    b1 = mx * mx + my * my + params.c1
    a2 = 2 * sxy + params.c2
    b2 = sxx + syy + params.c2
    lum = a1 / b1
    cs = a2 / b2
    return {"mx": mx, "my": my, "b1": b1, "b2": b2, "lum": lum, "cs": cs}


def _stats_backward(x, y, st, g_lum, g_cs, params):
    """Gradient w.r.t. ``x`` given upstream gradients of the luminance and
    contrast-structure maps."""
    g = params.kernel().astype(x.dtype)
    mx, my, b1, b2 = st["mx"], st["my"], st["b1"], st["b2"]
    dl_dmx = (2 * my - 2 * mx * st["lum"]) / b1
    dcs_dsxx = -st["cs"] / b2
    dcs_dsxy = 2.0 / b2
    g_exx = g_cs * dcs_dsxx
    g_exy = g_cs * dcs_dsxy
    g_mx = g_lum * dl_dmx - 2 * mx * g_exx - my * g_exy
    return (
        _filter_adjoint(g_mx, g)
        + 2 * x * _filter_adjoint(g_exx, g)
        + y * _filter_adjoint(g_exy, g)
    )


def ssim_map(a, b, params=DEFAULT, clamp=True):
    """Per-pixel, per-channel SSIM over the valid window positions."""
    a, b = _prep(a, b, clamp)
    _check_size(a, params)
    st = _stats(a, b, params)
    return st["lum"] * st["cs"]


def ssim(a, b, params=DEFAULT, clamp=True):
    return float(np.mean(ssim_map(a, b, params, clamp)))


def dssim(a, b, params=DEFAULT, clamp=True):
    return (1.0 - ssim(a, b, params, clamp)) / 2.0


def _dssim_value_grad(a, b, params, clamp):
    ac, bc = _prep(a, b, clamp)
    _check_size(ac, params)
    st = _stats(ac, bc, params)
    smap = st["lum"] * st["cs"]
    value = (1.0 - float(np.mean(smap))) / 2.0
    g_map = np.asarray(-0.5 / smap.size, dtype=ac.dtype)
    grad = _stats_backward(ac, bc, st, g_map * st["cs"], g_map * st["lum"], params)
    return value, grad * _clamp_mask(np.asarray(a), clamp)


def _n_scales(shape, params, max_scales=5):
    m = min(shape[_AX_H], shape[_AX_W])
    n = 0
    while n < max_scales and m >= params.window:
        n += 1
        m //= 2
    if n == 0:
        raise ValueError(f"image {shape} smaller than the {params.window}px SSIM window")
    return n


def _pool2(x):
    h, w = x.shape[_AX_H] // 2 * 2, x.shape[_AX_W] // 2 * 2
    x = x[..., :h, :w, :]
    return 0.25 * (
        x[..., 0::2, 0::2, :] + x[..., 1::2, 0::2, :] + x[..., 0::2, 1::2, :] + x[..., 1::2, 1::2, :]
    )


def _pool2_adjoint(g, shape):
    out = np.zeros(shape, dtype=g.dtype)
    q = 0.25 * g
    h, w = g.shape[_AX_H] * 2, g.shape[_AX_W] * 2
    for di in (0, 1):
        for dj in (0, 1):
            out[..., di:h:2, dj:w:2, :] = q
    return out


def _spatial_mean(m):
    return m.mean(axis=(_AX_H, _AX_W))


def _ms_value_grad(a, b, params, clamp, need_grad):
    ac, bc = _prep(a, b, clamp)
    n = _n_scales(ac.shape, params)
    weights = MS_WEIGHTS[:n] / MS_WEIGHTS[:n].sum()

    xs, ys, stats, terms = [ac], [bc], [], []
    for j in range(n):
        if j > 0:
            xs.append(_pool2(xs[-1]))
            ys.append(_pool2(ys[-1]))
        st = _stats(xs[j], ys[j], params)
        stats.append(st)
        if j < n - 1:
            terms.append(_spatial_mean(st["cs"]))
        else:
            terms.append(_spatial_mean(st["lum"] * st["cs"]))
    # per (batch..., channel) values
    clamped = [np.maximum(t, 0) for t in terms]
    ms = np.ones_like(clamped[0])
    for w, t in zip(weights, clamped):
        ms = ms * np.power(t, w)
    value = float(np.mean(ms))
    if not need_grad:
        return value, n, None

    g_ms = np.full_like(ms, 1.0 / ms.size)
    grad_x = None
    for j in range(n - 1, -1, -1):
        t = clamped[j]
        with np.errstate(divide="ignore", invalid="ignore"):
            g_t = np.where(t > 0, g_ms * ms * weights[j] / t, 0.0)
        st = stats[j]
        cnt = st["cs"].shape[_AX_H] * st["cs"].shape[_AX_W]
        g_t = np.expand_dims(g_t / cnt, axis=(_AX_H, _AX_W)).astype(ac.dtype)
        if j < n - 1:
            g_lum = np.zeros_like(st["cs"])
            g_cs = np.broadcast_to(g_t, st["cs"].shape)
        else:
            g_lum = g_t * st["cs"]
            g_cs = g_t * st["lum"]
        gj = _stats_backward(xs[j], ys[j], st, g_lum, g_cs, params)
        if grad_x is not None:
            gj = gj + _pool2_adjoint(grad_x, xs[j].shape)
        grad_x = gj
    return value, n, grad_x * _clamp_mask(np.asarray(a), clamp)


def ms_ssim(a, b, params=DEFAULT, clamp=True, return_scales=False):
    """Multi-scale SSIM. With fewer than 5 fitting scales the leading weights are
    renormalized; ``return_scales=True`` also returns the scale count used."""
    value, n, _ = _ms_value_grad(a, b, params, clamp, need_grad=False)
    return (value, n) if return_scales else value


def ms_dssim(a, b, params=DEFAULT, clamp=True, return_scales=False):
    value, n, _ = _ms_value_grad(a, b, params, clamp, need_grad=False)
    d = (1.0 - value) / 2.0
    return (d, n) if return_scales else d


METRICS = ("l1", "l2", "dssim", "msdssim")
_ALIASES = {"ms_dssim": "msdssim", "ms-dssim": "msdssim"}


def _canon(metric):
    name = _ALIASES.get(metric, metric)
    if name not in METRICS:
        raise ValueError(f"unsupported metric {metric!r}; choose from {METRICS}")
    return name


def evaluate(metric, a, b, clamp=True):
    name = _canon(metric)
    if name == "l1":
        return l1(a, b, clamp)
    if name == "l2":
        return l2(a, b, clamp)
    if name == "dssim":
        return dssim(a, b, clamp=clamp)
    return ms_dssim(a, b, clamp=clamp)


def value_and_grad(metric, a, b, clamp=True):
    """Metric value and its gradient with respect to ``a``."""
    name = _canon(metric)
    if name == "l1":
        return l1(a, b, clamp), _l1_grad(a, b, clamp)
    if name == "l2":
        return l2(a, b, clamp), _l2_grad(a, b, clamp)
    if name == "dssim":
        return _dssim_value_grad(a, b, DEFAULT, clamp)
    value, _, g = _ms_value_grad(a, b, DEFAULT, clamp, need_grad=True)
    # d ms_dssim / d ms_ssim = -1/2
    return (1.0 - value) / 2.0, -0.5 * g


def grad(metric, a, b, clamp=True):
    return value_and_grad(metric, a, b, clamp)[1]
