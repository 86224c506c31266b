"""Differentiable perturbation layers: additive delta, affine warp and per-pixel flow.

Every op accepts a single image ``(C, H, W)`` or a batch ``(N, C, H, W)``;
parameters are batched the same way (leading ``N`` axis, or none).
Gradients are hand-derived vector-Jacobian products.

Spatial layers use the inverse-warp convention: output pixel ``(r, c)`` is
sampled from source coordinate ``grid[r, c] = (col, row)``.  Source
coordinates are clamped to the image rectangle (border replicate).
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

KINDS = ("delta", "affine", "flow")


class _Params:
    kind = ""

    def arrays(self):
        return {f.name: np.asarray(getattr(self, f.name), dtype=np.float64) for f in fields(self)}

    def replace(self, **arrays):
        values = self.arrays()
        values.update(arrays)
        return type(self)(**values)

    def copy(self):
        return type(self)(**{k: np.array(v, copy=True) for k, v in self.arrays().items()})

    def map(self, fn):
        return type(self)(**{k: fn(v) for k, v in self.arrays().items()})

    def take(self, index):
        """Select samples from batched params."""
        return type(self)(**{k: v[index] for k, v in self.arrays().items()})

    def put(self, index, other):
        """Overwrite samples ``index`` of batched params with ``other`` (in place)."""
        src = other.arrays()
        for k, v in self.arrays().items():
            getattr(self, k)[index] = src[k]

    def to_json(self):
        arrays = self.arrays()
        values = np.concatenate([np.ravel(v) for v in arrays.values()])
        return {"kind": self.kind, "shape": list(self.json_shape()), "values": [float(v) for v in values]}

    def json_shape(self):
        raise NotImplementedError


@dataclass
class DeltaParams(_Params):
    delta: np.ndarray
    kind = "delta"

    def json_shape(self):
        return np.shape(self.delta)


@dataclass
class AffineParams(_Params):
    angle: np.ndarray = 0.0
    shift_x: np.ndarray = 0.0
    shift_y: np.ndarray = 0.0
    scale: np.ndarray = 1.0
    kind = "affine"

    def json_shape(self):
        return (4,) + np.shape(self.angle)


@dataclass
class FlowParams(_Params):
    u: np.ndarray
    v: np.ndarray
    kind = "flow"

    def json_shape(self):
        return (2,) + np.shape(self.u)


PARAM_TYPES = {"delta": DeltaParams, "affine": AffineParams, "flow": FlowParams}


def params_from_json(doc):
    kind, shape = doc["kind"], tuple(doc["shape"])
    values = np.asarray(doc["values"], dtype=np.float64)
    if kind not in PARAM_TYPES:
        raise ValueError(f"unknown layer kind {kind!r}")
    if values.size != int(np.prod(shape)):
        raise ValueError("values length does not match shape")
    values = values.reshape(shape)
    if kind == "delta":
        return DeltaParams(values)
    if kind == "flow":
        return FlowParams(values[0], values[1])
    return AffineParams(*values)


def identity_params(kind, image_shape, batch=None):
    """Identity element of a layer: delta 0, no warp, zero flow."""
    c, h, w = image_shape
    lead = () if batch is None else (batch,)
    if kind == "delta":
        return DeltaParams(np.zeros(lead + (c, h, w)))
    if kind == "flow":
        return FlowParams(np.zeros(lead + (h, w)), np.zeros(lead + (h, w)))
    if kind == "affine":
        z = np.zeros(lead)
        return AffineParams(z.copy(), z.copy(), z.copy(), np.ones(lead))
    raise ValueError(f"unknown layer kind {kind!r}")


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise ValueError(f"expected (C, H, W) or (N, C, H, W), got shape {x.shape}")


# -- delta -------------------------------------------------------------------


def delta_forward(x, p: DeltaParams):
    x = np.asarray(x, dtype=np.float64)
    if np.shape(p.delta) != x.shape:
        raise ValueError(f"delta shape {np.shape(p.delta)} does not match image {x.shape}")
    return np.clip(x + p.delta, 0.0, 1.0)


def delta_vjp(x, p: DeltaParams, upstream):
    x = np.asarray(x, dtype=np.float64)
    if np.shape(p.delta) != x.shape or np.shape(upstream) != x.shape:
        raise ValueError("delta vjp shape mismatch")
    z = x + p.delta
    g = np.where((z >= 0.0) & (z <= 1.0), upstream, 0.0)
    return DeltaParams(g), g


# -- bilinear sampling -------------------------------------------------------


def _sample_setup(shape, grid):
    n, c, h, w = shape
    gx, gy = grid[..., 0], grid[..., 1]
    if not (np.all(np.isfinite(gx)) and np.all(np.isfinite(gy))):
        raise ValueError("sampling grid contains non-finite coordinates")
    cx = np.clip(gx, 0.0, w - 1)
    cy = np.clip(gy, 0.0, h - 1)
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    return gx, gy, x0, y0, x1, y1, fx, fy


def _gather(xf, rows, cols, w):
    n = xf.shape[0]
    idx = (rows * w + cols).reshape(n, 1, -1)
    return np.take_along_axis(xf, idx, axis=2)


def _corners(x, rows0, cols0, rows1, cols1):
    n, c, h, w = x.shape
    xf = x.reshape(n, c, h * w)
    a = _gather(xf, rows0, cols0, w)  # x00
    b = _gather(xf, rows0, cols1, w)  # x10, horizontal neighbour
    d0 = _gather(xf, rows1, cols0, w)  # x01, vertical neighbour
    d1 = _gather(xf, rows1, cols1, w)  # x11
    return a, b, d0, d1


def bilinear_sample(x, grid):
    """Sample ``x`` at per-pixel source coordinates ``grid[..., (col, row)]``.

    Within the quadrant anchored at ``x00 = floor(coord)`` with fractional
    offsets ``(eh, ev)`` the value is
    ``x00 + (x10-x00)(1-ev)eh + (x01-x00)ev(1-eh) + (x11-x00)ev*eh``.
    """
    xb, single = _batched(x)
    g = np.asarray(grid, dtype=np.float64)
    if single:
        g = g[None]
    if g.ndim != 4 or g.shape[-1] != 2 or g.shape[0] != xb.shape[0]:
        raise ValueError(f"grid must have shape (H, W, 2) per image, got {np.shape(grid)}")
    n, c = xb.shape[:2]
    ho, wo = g.shape[1:3]
    _, _, x0, y0, x1, y1, fx, fy = _sample_setup(xb.shape, g)
    a, b, d0, d1 = _corners(xb, y0, x0, y1, x1)
    ex = fx.reshape(n, 1, -1)
    ey = fy.reshape(n, 1, -1)
    out = a + (b - a) * ((1.0 - ey) * ex) + (d0 - a) * (ey * (1.0 - ex)) + (d1 - a) * (ey * ex)
    out = out.reshape(n, c, ho, wo)
    return out[0] if single else out


def bilinear_vjp(x, grid, upstream):
    """Return ``(grid_gradient, input_gradient)`` of :func:`bilinear_sample`."""
    xb, single = _batched(x)
    g = np.asarray(grid, dtype=np.float64)
    up = np.asarray(upstream, dtype=np.float64)
    if single:
        g, up = g[None], up[None]
    n, c, h, w = xb.shape
    ho, wo = g.shape[1:3]
    gx, gy, x0, y0, x1, y1, fx, fy = _sample_setup(xb.shape, g)
    a, b, d0, d1 = _corners(xb, y0, x0, y1, x1)
    ex = fx.reshape(n, 1, -1)
    ey = fy.reshape(n, 1, -1)
    upf = up.reshape(n, c, -1)

    dfx = np.sum(upf * ((b - a) * (1.0 - ey) + (d1 - d0) * ey), axis=1).reshape(n, ho, wo)
    dfy = np.sum(upf * ((d0 - a) * (1.0 - ex) + (d1 - b) * ex), axis=1).reshape(n, ho, wo)
    dfx = np.where((gx >= 0.0) & (gx <= w - 1), dfx, 0.0)
    dfy = np.where((gy >= 0.0) & (gy <= h - 1), dfy, 0.0)
    dgrid = np.stack([dfx, dfy], axis=-1)

    base = (np.arange(n * c) * (h * w)).reshape(n, c, 1)
    idx = np.concatenate(
        [
            base + (y0 * w + x0).reshape(n, 1, -1),
            base + (y0 * w + x1).reshape(n, 1, -1),
            base + (y1 * w + x0).reshape(n, 1, -1),
            base + (y1 * w + x1).reshape(n, 1, -1),
        ],
        axis=2,
    )
    wts = np.concatenate(
        [
            upf * ((1.0 - ex) * (1.0 - ey)),
            upf * (ex * (1.0 - ey)),
            upf * ((1.0 - ex) * ey),
            upf * (ex * ey),
        ],
        axis=2,
    )
    dx = np.bincount(idx.ravel(), weights=wts.ravel(), minlength=n * c * h * w).reshape(n, c, h, w)
    if single:
        return dgrid[0], dx[0]
    return dgrid, dx


# -- flow --------------------------------------------------------------------


def _pixel_coords(h, w):
    rows, cols = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    return rows, cols


def flow_grid(p: FlowParams, h, w):
    rows, cols = _pixel_coords(h, w)
    return np.stack([cols + p.u, rows + p.v], axis=-1)


def flow_forward(x, p: FlowParams):
    """Displace each output pixel's sampling point by ``(u, v)`` pixels; channels share the field."""
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if np.shape(p.u) != x.shape[:-3] + (h, w) or np.shape(p.v) != np.shape(p.u):
        raise ValueError(f"flow fields {np.shape(p.u)} do not match image {x.shape}")
    return bilinear_sample(x, flow_grid(p, h, w))


def flow_vjp(x, p: FlowParams, upstream):
    x = np.asarray(x, dtype=np.float64)
    h, w = x.shape[-2:]
    if np.shape(p.u) != x.shape[:-3] + (h, w) or np.shape(upstream) != x.shape:
        raise ValueError("flow vjp shape mismatch")
    dgrid, dx = bilinear_vjp(x, flow_grid(p, h, w), upstream)
    return FlowParams(dgrid[..., 0], dgrid[..., 1]), dx


# -- affine ------------------------------------------------------------------


def make_affine_matrix(p: AffineParams, width, height):
    """2x3 matrix mapping normalized output coordinates in [-1, 1]^2 to source coordinates.

    Rotation by ``-angle`` about the centre, dilation ``1/scale``, then a
    translation of ``(-2 shift_x / width, -2 shift_y / height)``; positive
    shifts move content right/down.
    """
    angle, sx, sy, scale = (float(np.asarray(v)) for v in (p.angle, p.shift_x, p.shift_y, p.scale))
    if not scale > 0:
        raise ValueError("scale must be positive")
    cos, sin = np.cos(angle) / scale, np.sin(angle) / scale
    return np.array([[cos, sin, -2.0 * sx / width], [-sin, cos, -2.0 * sy / height]])


def _affine_terms(p: AffineParams, n, h, w):
    a = np.broadcast_to(np.asarray(p.angle, dtype=np.float64), (n,))
    s = np.broadcast_to(np.asarray(p.scale, dtype=np.float64), (n,))
    sx = np.broadcast_to(np.asarray(p.shift_x, dtype=np.float64), (n,))
    sy = np.broadcast_to(np.asarray(p.shift_y, dtype=np.float64), (n,))
    if np.any(~(s > 0)):
        raise ValueError("scale must be positive")
    rows, cols = _pixel_coords(h, w)
    dc = cols - (w - 1) / 2.0
    dr = rows - (h - 1) / 2.0
    return a, s, sx, sy, dc, dr


def affine_grid(p: AffineParams, n, h, w):
    """Pixel-space sampling grid, shape (n, h, w, 2).

    Equivalent to the normalized matrix of :func:`make_affine_matrix` with
    pixel centres at ``(2c + 1) / W - 1``, evaluated directly in pixel units
    so the identity warp reproduces integer coordinates exactly.
    """
    a, s, sx, sy, dc, dr = _affine_terms(p, n, h, w)
    cos = (np.cos(a) / s)[:, None, None]
    sin = (np.sin(a) / s)[:, None, None]
    src_x = (w - 1) / 2.0 + (cos * dc + sin * (w / h) * dr) - sx[:, None, None]
    src_y = (h - 1) / 2.0 + (-sin * (h / w) * dc + cos * dr) - sy[:, None, None]
    return np.stack([src_x, src_y], axis=-1)


def affine_forward(x, p: AffineParams):
    xb, single = _batched(x)
    n, _, h, w = xb.shape
    out = bilinear_sample(xb, affine_grid(p, n, h, w))
    return out[0] if single else out


def affine_vjp(x, p: AffineParams, upstream):
    xb, single = _batched(x)
    up = np.asarray(upstream, dtype=np.float64)
    if up.shape != np.shape(x):
        raise ValueError("affine vjp shape mismatch")
    if single:
        up = up[None]
    n, _, h, w = xb.shape
    dgrid, dx = bilinear_vjp(xb, affine_grid(p, n, h, w), up)
    gx, gy = dgrid[..., 0], dgrid[..., 1]
    a, s, _, _, dc, dr = _affine_terms(p, n, h, w)
    cos = (np.cos(a) / s)[:, None, None]
    sin = (np.sin(a) / s)[:, None, None]
    rot_x = cos * dc + sin * (w / h) * dr
    rot_y = -sin * (h / w) * dc + cos * dr
    d_angle = np.sum(gx * (-sin * dc + cos * (w / h) * dr) + gy * (-cos * (h / w) * dc - sin * dr), axis=(1, 2))
    d_scale = -np.sum(gx * rot_x + gy * rot_y, axis=(1, 2)) / s
    d_sx = -np.sum(gx, axis=(1, 2))
    d_sy = -np.sum(gy, axis=(1, 2))
    if single:
        grad = AffineParams(d_angle[0], d_sx[0], d_sy[0], d_scale[0])
        return grad, dx[0]
    return AffineParams(d_angle, d_sx, d_sy, d_scale), dx


# -- dispatch and composition ------------------------------------------------

_FORWARD = {"delta": delta_forward, "affine": affine_forward, "flow": flow_forward}
_VJP = {"delta": delta_vjp, "affine": affine_vjp, "flow": flow_vjp}


def layer_forward(kind, x, params):
    if kind not in _FORWARD:
        raise ValueError(f"unknown layer kind {kind!r}")
    return _FORWARD[kind](x, params)


def layer_vjp(kind, x, params, upstream):
    """Return ``(param_gradient, input_gradient)`` for one layer."""
    if kind not in _VJP:
        raise ValueError(f"unknown layer kind {kind!r}")
    if np.shape(upstream) != np.shape(x):
        raise ValueError("upstream gradient must match the layer output shape")
    return _VJP[kind](x, params, upstream)


@dataclass
class SequentialPerturbation:
    """Ordered layers; ``layers[0]`` is applied first."""

    layers: list  # of (kind, params)

    @property
    def kinds(self):
        return [k for k, _ in self.layers]

    @property
    def params(self):
        return [p for _, p in self.layers]


def sequential_forward(x, s: SequentialPerturbation, *, keep_inputs=False):
    inputs = []
    y = np.asarray(x, dtype=np.float64)
    for kind, p in s.layers:
        inputs.append(y)
        y = layer_forward(kind, y, p)
    return (y, inputs) if keep_inputs else y


def sequential_vjp(x, s: SequentialPerturbation, upstream, inputs=None):
    """Chain layer VJPs back to front; returns ``(per_layer_param_grads, input_grad)``."""
    if inputs is None:
        _, inputs = sequential_forward(x, s, keep_inputs=True)
    up = np.asarray(upstream, dtype=np.float64)
    grads = [None] * len(s.layers)
    for i in range(len(s.layers) - 1, -1, -1):
        kind, p = s.layers[i]
        grads[i], up = layer_vjp(kind, inputs[i], p, up)
    return grads, up
