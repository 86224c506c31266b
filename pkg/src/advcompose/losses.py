"""Attack and training objectives with their gradients.

Batched variants take logits of shape (N, C) and labels of shape (N,) and
return per-sample values.
"""

from __future__ import annotations

import numpy as np

TV_ETA = 1e-8


def _as_batch(logits, labels):
    z = np.asarray(logits, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    y = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if z.shape[1] < 2:
        raise ValueError("need at least two classes")
    if y.shape != (z.shape[0],) or y.min() < 0 or y.max() >= z.shape[1]:
        raise ValueError("label out of range")
    return z, y, single


def runner_up(logits, labels):
    """Index of the largest non-true logit; ties go to the lowest class index."""
    z, y, _ = _as_batch(logits, labels)
    masked = z.copy()
    masked[np.arange(len(y)), y] = -np.inf
    return np.argmax(masked, axis=1)


def cw_f6(logits, label, kappa=0.0):
    """Untargeted margin loss ``max(Z_y - max_{i != y} Z_i, -kappa)`` and its logit gradient.

    With ``kappa = 0`` the value is <= 0 exactly when the input is
    misclassified or tied at the decision boundary.
    """
    z, y, single = _as_batch(logits, label)
    rows = np.arange(len(y))
    other = runner_up(z, y)
    margin = z[rows, y] - z[rows, other]
    value = np.maximum(margin, -kappa)
    grad = np.zeros_like(z)
    active = margin > -kappa
    grad[rows[active], y[active]] = 1.0
    grad[rows[active], other[active]] = -1.0
    if single:
        return float(value[0]), grad[0]
    return value, grad


def cross_entropy(logits, label):
    """Softmax cross-entropy (max-subtracted) and gradient ``softmax - onehot``."""
    z, y, single = _as_batch(logits, label)
    rows = np.arange(len(y))
    shifted = z - z.max(axis=1, keepdims=True)
    logsum = np.log(np.sum(np.exp(shifted), axis=1))
    value = logsum - shifted[rows, y]
    grad = np.exp(shifted - logsum[:, None])
    grad[rows, y] -= 1.0
    if single:
        return float(value[0]), grad[0]
    return value, grad


def tv_flow_loss(u, v, eta=TV_ETA):
    """Smoothed total variation of a flow field, summed over each pixel's 4-neighbours.

    Every adjacent pair is visited from both sides, so each contributes
    ``2 * sqrt(du^2 + dv^2 + eta)``.  Accepts (H, W) or batched (N, H, W)
    fields and returns ``(value, (grad_u, grad_v))``.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape or u.ndim < 2 or u.shape[-1] * u.shape[-2] == 0:
        raise ValueError("flow fields must be non-empty and of equal shape")
    value = np.zeros(u.shape[:-2])
    gu = np.zeros_like(u)
    gv = np.zeros_like(v)
    for axis in (-1, -2):
        du = np.diff(u, axis=axis)
        dv = np.diff(v, axis=axis)
        s = np.sqrt(du**2 + dv**2 + eta)
        value = value + 2.0 * np.sum(s, axis=(-2, -1))
        # d/d(next) of 2*s is 2*du/s; d/d(prev) is the negative
        cu, cv = 2.0 * du / s, 2.0 * dv / s
        pad_hi = [(0, 0)] * u.ndim
        pad_lo = [(0, 0)] * u.ndim
        pad_hi[axis] = (1, 0)
        pad_lo[axis] = (0, 1)
        gu += np.pad(cu, pad_hi) - np.pad(cu, pad_lo)
        gv += np.pad(cv, pad_hi) - np.pad(cv, pad_lo)
    if value.ndim == 0:
        value = float(value)
    return value, (gu, gv)
