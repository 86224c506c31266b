"""Distances and perceptual similarity: l2 / linf, windowed SSIM and an activation-cosine metric."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .errors import InvalidState

SSIM_WINDOW = 8
SSIM_C1 = (0.01 * 1.0) ** 2
SSIM_C2 = (0.03 * 1.0) ** 2


def _pair(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {y.shape}")
    return x, y


def lp_distance(x, y, p=2):
    """l2 or linf distance over all intensity coordinates (per sample for batches)."""
    x, y = _pair(x, y)
    d = np.abs(x - y)
    axes = tuple(range(d.ndim - 3, d.ndim)) if d.ndim >= 3 else None
    if p in (np.inf, "inf", float("inf")):
        out = np.max(d, axis=axes)
    elif p == 2:
        out = np.sqrt(np.sum(d * d, axis=axes))
    else:
        raise ValueError(f"unsupported p={p!r}; use 2 or inf")
    return float(out) if np.ndim(out) == 0 else out


# -- SSIM --------------------------------------------------------------------


def _box_mean(a, k=SSIM_WINDOW):
    """Mean over every k x k window (valid positions) on the last two axes."""
    c = np.cumsum(np.cumsum(a, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (a.ndim - 2) + [(1, 0), (1, 0)])
    s = c[..., k:, k:] - c[..., :-k, k:] - c[..., k:, :-k] + c[..., :-k, :-k]
    return s / (k * k)


def _box_mean_adjoint(g, k=SSIM_WINDOW):
    """Transpose of :func:`_box_mean`: spread each window value over its pixels."""
    padded = np.pad(g, [(0, 0)] * (g.ndim - 2) + [(k - 1, k - 1), (k - 1, k - 1)])
    return _box_mean(padded, k)


def _gray(x):
    return np.mean(x, axis=-3)


def _ssim_terms(gx, gy):
    mx, my = _box_mean(gx), _box_mean(gy)
    exx, eyy, exy = _box_mean(gx * gx), _box_mean(gy * gy), _box_mean(gx * gy)
    vx, vy, cxy = exx - mx * mx, eyy - my * my, exy - mx * my
    a1 = 2.0 * mx * my + SSIM_C1
    a2 = 2.0 * cxy + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = vx + vy + SSIM_C2
    return mx, my, a1, a2, b1, b2


def _check_window(x):
    if x.shape[-1] < SSIM_WINDOW or x.shape[-2] < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")


def ssim(x, y):
    """Mean SSIM over all 8x8 windows (stride 1, uniform weights) of the channel-mean image."""
    x, y = _pair(x, y)
    _check_window(x)
    _, _, a1, a2, b1, b2 = _ssim_terms(_gray(x), _gray(y))
    out = np.mean((a1 * a2) / (b1 * b2), axis=(-2, -1))
    return float(out) if np.ndim(out) == 0 else out


def ssim_grad(x, y):
    """SSIM and its gradient with respect to the second argument."""
    x, y = _pair(x, y)
    _check_window(x)
    gx, gy = _gray(x), _gray(y)
    mx, my, a1, a2, b1, b2 = _ssim_terms(gx, gy)
    s = (a1 * a2) / (b1 * b2)
    nwin = s.shape[-1] * s.shape[-2]
    # partials of s w.r.t. (my, E[y^2], E[xy]), then through var/cov definitions
    ds_dmy = s * (2.0 * mx / a1 - 2.0 * my / b1)
    ds_dcov = s * (2.0 / a2)
    ds_dvy = -s / b2
    g_my = (ds_dmy - 2.0 * my * ds_dvy - mx * ds_dcov) / nwin
    g_eyy = ds_dvy / nwin
    g_exy = ds_dcov / nwin
    grad_gray = _box_mean_adjoint(g_my) + 2.0 * gy * _box_mean_adjoint(g_eyy) + gx * _box_mean_adjoint(g_exy)
    c = x.shape[-3]
    grad = np.repeat(np.expand_dims(grad_gray / c, -3), c, axis=-3)
    value = np.mean(s, axis=(-2, -1))
    return (float(value) if np.ndim(value) == 0 else value), grad


# -- activation-cosine perceptual metric -------------------------------------


def _unit(a):
    norm = np.sqrt(np.sum(a * a, axis=-3, keepdims=True))
    safe = np.where(norm > 0.0, norm, 1.0)
    return np.where(norm > 0.0, a / safe, 0.0), norm


def _require_trained(net):
    if not getattr(net, "trained", False):
        raise InvalidState("perceptual metric needs a trained network (net.trained is False)")


def lpips_style(net, x, y):
    """Sum over both conv activation maps of the spatial mean of ``||n_x - n_y||^2``,
    where ``n`` is the channel vector at each position scaled to unit length.

    Not comparable to LPIPS values computed with a pretrained network.
    """
    x, y = _pair(x, y)
    _require_trained(net)
    ax, _ = net.activations(x)
    ay, _ = net.activations(y)
    total = 0.0
    for a, b in zip(ax, ay):
        d = _unit(a)[0] - _unit(b)[0]
        total = total + np.mean(np.sum(d * d, axis=-3), axis=(-2, -1))
    return float(total) if np.ndim(total) == 0 else total


def lpips_style_grad(net, x, y):
    """Metric value and gradient with respect to ``y``."""
    x, y = _pair(x, y)
    _require_trained(net)
    ax, _ = net.activations(x)
    ay, cache = net.activations(y)
    total = 0.0
    ups = []
    for a, b in zip(ax, ay):
        nx = _unit(a)[0]
        ny, norm = _unit(b)
        d = nx - ny
        positions = d.shape[-1] * d.shape[-2]
        total = total + np.mean(np.sum(d * d, axis=-3), axis=(-2, -1))
        g_n = -2.0 * d / positions
        proj = g_n - ny * np.sum(ny * g_n, axis=-3, keepdims=True)
        ups.append(np.where(norm > 0.0, proj / np.where(norm > 0.0, norm, 1.0), 0.0))
    grad, _ = net.backward(cache, dact1=ups[0], dact2=ups[1], need_params=False)
    return (float(total) if np.ndim(total) == 0 else total), grad


def perceptual_distance_grad(metric, net, x, y):
    """Distance (0 at y = x) and its gradient in ``y`` for ``lpips_style`` or ``ssim`` (1 - SSIM)."""
    if metric == "lpips_style":
        return lpips_style_grad(net, x, y)
    if metric == "ssim":
        value, grad = ssim_grad(x, y)
        return 1.0 - value, -grad
    raise ValueError(f"unknown perceptual metric {metric!r}")


@dataclass
class MetricReport:
    linf: float
    l2: float
    ssim: float
    lpips_style: float

    def to_dict(self):
        return asdict(self)


def metric_report(net, x, y):
    x, y = _pair(x, y)
    lp = lpips_style(net, x, y) if getattr(net, "trained", False) and hasattr(net, "activations") else float("nan")
    s = ssim(x, y) if min(x.shape[-2:]) >= SSIM_WINDOW else float("nan")
    return MetricReport(lp_distance(x, y, np.inf), lp_distance(x, y, 2), s, lp)
