"""Central finite-difference verification of every hand-written gradient.

Each check draws random points, a random unit direction ``d`` and compares
the analytic directional derivative ``<g, d>`` with
``(f(z + h d) - f(z - h d)) / 2h``.  Points whose piecewise structure
(ReLU pattern, pooling argmax, bilinear cell, clip mask, runner-up class)
changes inside ``[z - h d, z + h d]`` are redrawn, since the derivative is
not defined across those kinks.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import layers, losses, metrics
from .classifier import ConvNet, TrainConfig, train
from .imagecore import synth_dataset

STEP = 1e-5
POINTS = 100
LAYER_TOL = 1e-5
LOSS_TOL = 1e-5
SSIM_TOL = 1e-5
NET_TOL = 1e-4
MAX_REDRAWS = 50


@dataclass
class OpReport:
    name: str
    tolerance: float
    max_rel_error: float
    points: int
    redraws: int

    @property
    def passed(self):
        return self.max_rel_error < self.tolerance

    def line(self):
        status = "ok" if self.passed else "FAIL"
        return (f"{self.name:<24} max_rel_err={self.max_rel_error:.3e} tol={self.tolerance:.0e} "
                f"points={self.points} redraws={self.redraws} {status}")


@dataclass
class _Case:
    """A scalar function of a flat vector, the point, its analytic gradient and a kink signature."""

    f: object
    z: np.ndarray
    grad: np.ndarray
    signature: object = None


def relative_error(a, b):
    scale = max(abs(a), abs(b))
    return 0.0 if scale == 0.0 else abs(a - b) / scale


def check_case(case: _Case, rng, h=STEP):
    """Relative error of one case, or None when the probe straddles a kink."""
    d = rng.standard_normal(case.z.shape)
    d /= np.linalg.norm(d)
    zp, zm = case.z + h * d, case.z - h * d
    if case.signature is not None:
        s0 = case.signature(case.z)
        if not (np.array_equal(s0, case.signature(zp)) and np.array_equal(s0, case.signature(zm))):
            return None
    numeric = (case.f(zp) - case.f(zm)) / (2.0 * h)
    return relative_error(float(case.grad @ d), numeric)


# -- case builders -----------------------------------------------------------

SHAPE = (3, 8, 8)


def _split(z, *shapes):
    out, i = [], 0
    for s in shapes:
        n = math.prod(s)
        out.append(z[i : i + n].reshape(s))
        i += n
    return out


def _flat(*arrays):
    return np.concatenate([np.ravel(a) for a in arrays])


def _grid_signature(grid):
    return np.floor(grid).astype(np.int64).ravel()


def _delta_case(rng):
    x = rng.uniform(0.0, 1.0, SHAPE)
    delta = rng.uniform(-0.1, 0.1, SHAPE)
    w = rng.standard_normal(SHAPE)

    def f(z):
        xi, di = _split(z, SHAPE, SHAPE)
        return float(np.sum(w * layers.delta_forward(xi, layers.DeltaParams(di))))

    gp, gx = layers.delta_vjp(x, layers.DeltaParams(delta), w)

    def sig(z):
        xi, di = _split(z, SHAPE, SHAPE)
        s = xi + di
        return np.concatenate([(s >= 0).ravel(), (s <= 1).ravel()])

    return _Case(f, _flat(x, delta), _flat(gx, gp.delta), sig)


def _flow_case(rng):
    h, w_ = SHAPE[1:]
    x = rng.uniform(0.0, 1.0, SHAPE)
    u, v = rng.uniform(-1.6, 1.6, (2, h, w_))
    w = rng.standard_normal(SHAPE)

    def f(z):
        xi, ui, vi = _split(z, SHAPE, (h, w_), (h, w_))
        return float(np.sum(w * layers.flow_forward(xi, layers.FlowParams(ui, vi))))

    gp, gx = layers.flow_vjp(x, layers.FlowParams(u, v), w)

    def sig(z):
        _, ui, vi = _split(z, SHAPE, (h, w_), (h, w_))
        return _grid_signature(layers.flow_grid(layers.FlowParams(ui, vi), h, w_))

    return _Case(f, _flat(x, u, v), _flat(gx, gp.u, gp.v), sig)


def _affine_params(z):
    a, sx, sy, s = z
    return layers.AffineParams(a, sx, sy, s)


def _affine_case(rng):
    h, w_ = SHAPE[1:]
    x = rng.uniform(0.0, 1.0, SHAPE)
    p = layers.AffineParams(rng.uniform(-math.pi / 24, math.pi / 24), *rng.uniform(-3.2, 3.2, 2),
                            math.exp(rng.uniform(-0.1, 0.1)))
    w = rng.standard_normal(SHAPE)

    def f(z):
        xi, pz = _split(z, SHAPE, (4,))
        return float(np.sum(w * layers.affine_forward(xi, _affine_params(pz))))

    gp, gx = layers.affine_vjp(x, p, w)

    def sig(z):
        _, pz = _split(z, SHAPE, (4,))
        return _grid_signature(layers.affine_grid(_affine_params(pz), 1, h, w_))

    z0 = _flat(x, [p.angle, p.shift_x, p.shift_y, p.scale])
    return _Case(f, z0, _flat(gx, [gp.angle, gp.shift_x, gp.shift_y, gp.scale]), sig)


def _sequential_case(rng):
    """affine -> flow -> delta, checked end to end through ``sequential_vjp``."""
    h, w_ = SHAPE[1:]
    shapes = (SHAPE, (4,), (h, w_), (h, w_), SHAPE)
    x = rng.uniform(0.0, 1.0, SHAPE)
    pz = np.array([rng.uniform(-0.1, 0.1), *rng.uniform(-1.0, 1.0, 2), math.exp(rng.uniform(-0.05, 0.05))])
    u, v = rng.uniform(-1.0, 1.0, (2, h, w_))
    delta = rng.uniform(-0.05, 0.05, SHAPE)
    w = rng.standard_normal(SHAPE)

    def build(z):
        xi, a, ui, vi, di = _split(z, *shapes)
        s = layers.SequentialPerturbation(
            [("affine", _affine_params(a)), ("flow", layers.FlowParams(ui, vi)), ("delta", layers.DeltaParams(di))])
        return xi, s

    def f(z):
        xi, s = build(z)
        return float(np.sum(w * layers.sequential_forward(xi, s)))

    def sig(z):
        xi, s = build(z)
        _, inputs = layers.sequential_forward(xi, s, keep_inputs=True)
        pre = inputs[2] + s.params[2].delta
        return np.concatenate([
            _grid_signature(layers.affine_grid(s.params[0], 1, h, w_)),
            _grid_signature(layers.flow_grid(s.params[1], h, w_)),
            (pre >= 0).ravel(), (pre <= 1).ravel(),
        ])

    z0 = _flat(x, pz, u, v, delta)
    xi, s = build(z0)
    grads, gx = layers.sequential_vjp(xi, s, w)
    ga, gf, gd = grads
    g = _flat(gx, [ga.angle, ga.shift_x, ga.shift_y, ga.scale], gf.u, gf.v, gd.delta)
    return _Case(f, z0, g, sig)


def _cw_case(rng):
    k = 10
    logits = rng.standard_normal(k) * 3.0
    y = int(rng.integers(k))
    kappa = float(rng.uniform(0.0, 2.0))
    # the clamped branch has zero gradient; sample the active one
    others = np.delete(logits, y)
    logits[y] = others.max() + rng.uniform(-0.9 * kappa, 3.0)
    _, g = losses.cw_f6(logits, y, kappa)

    def sig(z):
        r = losses.runner_up(z, y)[0]
        return np.array([r, z[y] - z[r] > -kappa])

    return _Case(lambda z: losses.cw_f6(z, y, kappa)[0], logits, g, sig)


def _ce_case(rng):
    logits = rng.standard_normal(10) * 3.0
    y = int(rng.integers(10))
    _, g = losses.cross_entropy(logits, y)
    return _Case(lambda z: losses.cross_entropy(z, y)[0], logits, g)


def _tv_case(rng):
    shape = (8, 8)
    u, v = rng.uniform(-1.6, 1.6, (2, *shape))
    _, (gu, gv) = losses.tv_flow_loss(u, v)

    def f(z):
        a, b = _split(z, shape, shape)
        return float(losses.tv_flow_loss(a, b)[0])

    return _Case(f, _flat(u, v), _flat(gu, gv))


def _ssim_case(rng):
    x = rng.uniform(0.0, 1.0, SHAPE)
    y = np.clip(x + rng.normal(0.0, 0.2, SHAPE), 0.0, 1.0)
    _, g = metrics.ssim_grad(x, y)
    return _Case(lambda z: metrics.ssim(x, z.reshape(SHAPE)), y.ravel(), g.ravel())


def _net_input_case(net, rng):
    shape = net.input_shape
    x = rng.uniform(0.0, 1.0, shape)
    w = rng.standard_normal(net.num_classes)
    g = net.input_gradient(x, w)
    return _Case(lambda z: float(w @ net.logits(z.reshape(shape))), x.ravel(), g.ravel(),
                 lambda z: net.kink_signature(z.reshape(shape)))


def _net_param_case(net, rng):
    x = rng.uniform(0.0, 1.0, net.input_shape)
    w = rng.standard_normal(net.num_classes)
    names = list(net.params)
    shapes = [net.params[k].shape for k in names]
    probe = net.copy()

    def load(z):
        for k, a in zip(names, _split(z, *shapes)):
            probe.params[k] = a
        return probe

    _, cache = net.forward(x)
    _, grads = net.backward(cache, dlogits=w)
    z0 = _flat(*(net.params[k] for k in names))
    return _Case(lambda z: float(w @ load(z).logits(x)), z0, _flat(*(grads[k] for k in names)),
                 lambda z: load(z).kink_signature(x))


def _lpips_case(net, rng):
    shape = net.input_shape
    x = rng.uniform(0.0, 1.0, shape)
    y = np.clip(x + rng.normal(0.0, 0.1, shape), 0.0, 1.0)
    _, g = metrics.lpips_style_grad(net, x, y)
    return _Case(lambda z: metrics.lpips_style(net, x, z.reshape(shape)), y.ravel(), g.ravel(),
                 lambda z: net.kink_signature(z.reshape(shape)))


def reference_net(seed):
    """Small briefly-trained network so activation patterns resemble real use."""
    data = synth_dataset(seed, 120)
    net = ConvNet(seed=seed)
    train(net, data, TrainConfig(epochs=2, batch_size=20, seed=seed))
    return net


def check_names():
    return [name for name, _, _ in _registry(None)]


def _registry(net):
    return [
        ("layers.delta", LAYER_TOL, _delta_case),
        ("layers.flow", LAYER_TOL, _flow_case),
        ("layers.affine", LAYER_TOL, _affine_case),
        ("layers.sequential", LAYER_TOL, _sequential_case),
        ("losses.cw_f6", LOSS_TOL, _cw_case),
        ("losses.cross_entropy", LOSS_TOL, _ce_case),
        ("losses.tv_flow", LOSS_TOL, _tv_case),
        ("metrics.ssim", SSIM_TOL, _ssim_case),
        ("classifier.input", NET_TOL, lambda rng: _net_input_case(net, rng)),
        ("classifier.params", NET_TOL, lambda rng: _net_param_case(net, rng)),
        ("metrics.lpips_style", NET_TOL, lambda rng: _lpips_case(net, rng)),
    ]


def run_gradcheck(seed=1, points=POINTS, corrupt=None, h=STEP):
    """Run every check; ``corrupt`` names an op whose analytic gradient is scaled by 1.001.

    The corruption hook exists so the harness itself can be shown to catch a
    wrong gradient.
    """
    names = check_names()
    if corrupt is not None and corrupt not in names:
        raise ValueError(f"unknown op {corrupt!r}; choose from {', '.join(names)}")
    net = reference_net(seed)
    reports = []
    for i, (name, tol, build) in enumerate(_registry(net)):
        rng = np.random.default_rng([seed, i])
        worst, done, redraws = 0.0, 0, 0
        while done < points:
            case = build(rng)
            if name == corrupt:
                case.grad = case.grad * 1.001
            err = check_case(case, rng, h)
            if err is None:
                redraws += 1
                if redraws > MAX_REDRAWS * points:
                    raise RuntimeError(f"{name}: could not find kink-free points")
                continue
            worst = max(worst, err)
            done += 1
        reports.append(OpReport(name, tol, worst, done, redraws))
    return reports
