"""Small convolutional classifier with hand-written backpropagation.

Architecture: conv3x3(C->8, pad 1) -> ReLU -> maxpool2 -> conv3x3(8->16, pad 1)
-> ReLU -> maxpool2 -> flatten -> fully connected -> logits.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import losses
from .errors import FormatError, TrainingDiverged

CKPT_MAGIC = b"ADVNET"
CKPT_VERSION = 1
PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b", "fc_w", "fc_b")


def _conv_forward(x, w, b):
    """3x3 same-padding convolution as one GEMM; cols is (C*9, N*H*W)."""
    n, c, h, wd = x.shape
    o = w.shape[0]
    xp = np.zeros((c, n, h + 2, wd + 2))
    xp[:, :, 1:-1, 1:-1] = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, 9, n, h, wd))
    for k in range(9):
        i, j = divmod(k, 3)
        cols[:, k] = xp[:, :, i : i + h, j : j + wd]
    cols = cols.reshape(c * 9, n * h * wd)
    out = w.reshape(o, c * 9) @ cols + b[:, None]
    return out.reshape(o, n, h, wd).transpose(1, 0, 2, 3), cols


def _conv_backward(dout, cols, w, x_shape, need_input=True, need_params=True):
    c = x_shape[1]
    o = w.shape[0]
    dw = db = None
    if need_params:
        d2 = dout.transpose(1, 0, 2, 3).reshape(o, -1)
        dw = (d2 @ cols.T).reshape(w.shape)
        db = d2.sum(axis=1)
    if not need_input:
        return None, dw, db
    # input gradient = correlation of dout with the spatially flipped, channel-transposed kernel
    flipped = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx, _ = _conv_forward(dout, flipped, np.zeros(c))
    return dx, dw, db


def _pool_forward(x):
    n, c, h, w = x.shape
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    arg = np.argmax(win, axis=-1)  # first maximum in row-major scan order
    return np.take_along_axis(win, arg[..., None], axis=-1)[..., 0], arg


def _pool_backward(dout, arg, shape):
    n, c, h, w = shape
    win = np.zeros((n, c, h // 2, w // 2, 4))
    np.put_along_axis(win, arg[..., None], dout[..., None], axis=-1)
    return win.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(shape)


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        return x[None], True
    if x.ndim != 4:
        raise ValueError(f"expected (C, H, W) or (N, C, H, W), got {x.shape}")
    return x, False


class ConvNet:
    """The fixed desk-scale classifier.

    ``activation="identity"`` swaps the ReLUs for identities; it exists only
    so tests can compare gradients against a closed-form linear map.
    """

    def __init__(self, in_channels=3, size=16, num_classes=3, seed=0, activation="relu"):
        if size % 4:
            raise ValueError("input size must be divisible by 4")
        self.in_channels = in_channels
        self.size = size
        self.num_classes = num_classes
        self.activation = activation
        self.trained = False
        rng = np.random.default_rng(seed)
        flat = 16 * (size // 4) ** 2

        def glorot(shape, fan_in, fan_out):
            limit = np.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, shape)

        self.params = {
            "conv1_w": glorot((8, in_channels, 3, 3), in_channels * 9, 8 * 9),
            "conv1_b": np.zeros(8),
            "conv2_w": glorot((16, 8, 3, 3), 8 * 9, 16 * 9),
            "conv2_b": np.zeros(16),
            "fc_w": glorot((num_classes, flat), flat, num_classes),
            "fc_b": np.zeros(num_classes),
        }

    @property
    def input_shape(self):
        return (self.in_channels, self.size, self.size)

    def _act(self, z):
        return z if self.activation == "identity" else np.maximum(z, 0.0)

    def _act_grad(self, z, g):
        return g if self.activation == "identity" else np.where(z > 0.0, g, 0.0)

    def forward(self, x):
        """Logits (N, K) (or (K,) for one image) and the activation cache."""
        xb, single = _batched(x)
        if xb.shape[1:] != self.input_shape:
            raise ValueError(f"input shape {xb.shape[1:]} does not match network {self.input_shape}")
        p = self.params
        z1, cols1 = _conv_forward(xb, p["conv1_w"], p["conv1_b"])
        a1 = self._act(z1)
        h1, arg1 = _pool_forward(a1)
        z2, cols2 = _conv_forward(h1, p["conv2_w"], p["conv2_b"])
        a2 = self._act(z2)
        h2, arg2 = _pool_forward(a2)
        flat = h2.reshape(len(xb), -1)
        logits = flat @ p["fc_w"].T + p["fc_b"]
        cache = dict(single=single, x_shape=xb.shape, cols1=cols1, z1=z1, a1=a1, h1_shape=h1.shape,
                     arg1=arg1, cols2=cols2, z2=z2, a2=a2, arg2=arg2, flat=flat)
        return (logits[0] if single else logits), cache

    def logits(self, x):
        return self.forward(x)[0]

    def activations(self, x):
        """Post-ReLU maps of both conv layers (used by the perceptual metric)."""
        _, cache = self.forward(x)
        if cache["single"]:
            return [cache["a1"][0], cache["a2"][0]], cache
        return [cache["a1"], cache["a2"]], cache

    def backward(self, cache, dlogits=None, dact1=None, dact2=None, need_params=True):
        """Backpropagate upstream gradients on logits and/or activations.

        Returns ``(input_gradient, param_gradients)``; ``param_gradients`` is
        None when ``need_params`` is false.
        """
        single = cache["single"]
        n = cache["x_shape"][0]
        p = self.params
        grads = {}

        def lift(g):
            if g is None:
                return None
            g = np.asarray(g, dtype=np.float64)
            return g[None] if single else g

        dlogits, dact1, dact2 = lift(dlogits), lift(dact1), lift(dact2)
        if dlogits is None:
            dlogits = np.zeros((n, self.num_classes))
        if need_params:
            grads["fc_w"] = dlogits.T @ cache["flat"]
            grads["fc_b"] = dlogits.sum(axis=0)
        dh2 = (dlogits @ p["fc_w"]).reshape(n, 16, self.size // 4, self.size // 4)
        da2 = _pool_backward(dh2, cache["arg2"], cache["a2"].shape)
        if dact2 is not None:
            da2 = da2 + dact2
        dz2 = self._act_grad(cache["z2"], da2)
        dh1, grads["conv2_w"], grads["conv2_b"] = _conv_backward(
            dz2, cache["cols2"], p["conv2_w"], cache["h1_shape"], need_params=need_params)
        da1 = _pool_backward(dh1, cache["arg1"], cache["a1"].shape)
        if dact1 is not None:
            da1 = da1 + dact1
        dz1 = self._act_grad(cache["z1"], da1)
        dx, grads["conv1_w"], grads["conv1_b"] = _conv_backward(
            dz1, cache["cols1"], p["conv1_w"], cache["x_shape"], need_params=need_params)
        if single:
            dx = dx[0]
        return dx, (grads if need_params else None)

    def input_gradient(self, x, upstream):
        """Gradient of ``<upstream, logits(x)>`` with respect to ``x``."""
        _, cache = self.forward(x)
        return self.backward(cache, dlogits=upstream, need_params=False)[0]

    def predict(self, x, chunk=512):
        xb, single = _batched(x)
        out = [np.argmax(self.logits(xb[i : i + chunk]), axis=1) for i in range(0, len(xb), chunk)]
        pred = np.concatenate(out) if out else np.zeros(0, dtype=np.int64)
        return int(pred[0]) if single else pred

    def copy(self):
        other = ConvNet.__new__(ConvNet)
        other.__dict__.update(self.__dict__)
        other.params = {k: v.copy() for k, v in self.params.items()}
        return other

    def kink_signature(self, x):
        """Activation pattern; equal signatures mean the network is locally affine between inputs."""
        _, c = self.forward(x)
        return np.concatenate([(c["z1"] > 0).ravel(), (c["z2"] > 0).ravel(), c["arg1"].ravel(), c["arg2"].ravel()])


class LinearClassifier:
    """``logits = W vec(x) + b``; a closed-form reference model for attack tests."""

    def __init__(self, weight, bias, input_shape):
        self.weight = np.asarray(weight, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        self.input_shape = tuple(input_shape)
        self.num_classes = len(self.bias)
        self.trained = True

    def forward(self, x):
        xb, single = _batched(x)
        logits = xb.reshape(len(xb), -1) @ self.weight.T + self.bias
        return (logits[0] if single else logits), {"single": single, "n": len(xb)}

    def logits(self, x):
        return self.forward(x)[0]

    def backward(self, cache, dlogits=None, need_params=False, **_):
        g = np.atleast_2d(np.asarray(dlogits, dtype=np.float64))
        dx = (g @ self.weight).reshape((len(g),) + self.input_shape)
        return (dx[0] if cache["single"] else dx), None

    def input_gradient(self, x, upstream):
        _, cache = self.forward(x)
        return self.backward(cache, dlogits=upstream)[0]

    def predict(self, x):
        z = self.logits(x)
        return int(np.argmax(z)) if z.ndim == 1 else np.argmax(z, axis=1)


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(net: ConvNet, path):
    """Header (magic, version, flags, tensor count), shape table, little-endian f64 payload."""
    flags = 1 if net.trained else 0
    out = [CKPT_MAGIC, struct.pack("<HHI", CKPT_VERSION, flags, len(PARAM_ORDER))]
    for name in PARAM_ORDER:
        arr = net.params[name]
        enc = name.encode("ascii")
        out.append(struct.pack("<H", len(enc)) + enc + struct.pack("<B", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for name in PARAM_ORDER:
        out.append(np.ascontiguousarray(net.params[name], dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(out))


def load_checkpoint(path) -> ConvNet:
    with open(path, "rb") as fh:
        data = fh.read()
    if not data.startswith(CKPT_MAGIC):
        raise FormatError("not a network checkpoint", offset=0)
    pos = len(CKPT_MAGIC)
    try:
        version, flags, count = struct.unpack_from("<HHI", data, pos)
        pos += 8
        if version != CKPT_VERSION:
            raise FormatError(f"unsupported checkpoint version {version}")
        shapes = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2 : pos + 2 + nlen].decode("ascii")
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 1)
            pos += 1 + 4 * ndim
            shapes.append((name, shape))
        params = {}
        for name, shape in shapes:
            size = int(np.prod(shape))
            if pos + 8 * size > len(data):
                raise FormatError("checkpoint payload truncated", offset=len(data))
            params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except struct.error as exc:
        raise FormatError(f"corrupt checkpoint header: {exc}", offset=pos) from None
    if set(params) != set(PARAM_ORDER):
        raise FormatError("checkpoint is missing tensors")
    c1 = params["conv1_w"]
    fc = params["fc_w"]
    size = int(round(np.sqrt(fc.shape[1] / 16))) * 4
    net = ConvNet(in_channels=c1.shape[1], size=size, num_classes=fc.shape[0])
    net.params = params
    net.trained = bool(flags & 1)
    return net


# -- training ----------------------------------------------------------------


@dataclass
class AdversarialConfig:
    attack: object  # attacks.AttackConfig
    mix: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.mix <= 1.0:
            raise ValueError("mix ratio must lie in [0, 1]")


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    adversarial: Optional[AdversarialConfig] = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self):
        adv = None
        if self.adversarial is not None:
            adv = {"attack": self.adversarial.attack.to_dict(), "mix": self.adversarial.mix}
        return {"epochs": self.epochs, "batch_size": self.batch_size, "learning_rate": self.learning_rate,
                "momentum": self.momentum, "seed": self.seed, "adversarial": adv}

    @classmethod
    def from_dict(cls, doc):
        from .attacks import AttackConfig

        doc = dict(doc)
        adv = doc.pop("adversarial", None)
        unknown = set(doc) - {"epochs", "batch_size", "learning_rate", "momentum", "seed"}
        if unknown:
            raise ValueError(f"unknown train config fields: {sorted(unknown)}")
        if adv is not None:
            adv = AdversarialConfig(AttackConfig.from_dict(adv["attack"]), float(adv.get("mix", 0.5)))
        return cls(adversarial=adv, **doc)


@dataclass
class TrainLog:
    epoch_loss: list = field(default_factory=list)
    epoch_accuracy: list = field(default_factory=list)


def train(net: ConvNet, dataset, cfg: TrainConfig):
    """Minibatch SGD with momentum on mean cross-entropy; mutates and returns ``net``.

    With ``cfg.adversarial`` set, the first ``round(mix * B)`` samples of every
    shuffled batch are replaced by adversarial versions crafted against the
    current weights.
    """
    if len(dataset) == 0:
        raise ValueError("cannot train on an empty dataset")
    rng = np.random.default_rng(cfg.seed)
    velocity = {k: np.zeros_like(v) for k, v in net.params.items()}
    log = TrainLog()
    adv = cfg.adversarial if cfg.adversarial is not None and cfg.adversarial.mix > 0 else None
    if adv is not None:
        from .attacks import run_attack

    for _ in range(cfg.epochs):
        order = rng.permutation(len(dataset))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            x = dataset.images[idx]
            y = dataset.labels[idx]
            if adv is not None:
                k = int(round(adv.mix * len(idx)))
                if k:
                    x = x.copy()
                    x[:k] = run_attack(net, x[:k], y[:k], adv.attack).perturbed
            logits, cache = net.forward(x)
            value, dlogits = losses.cross_entropy(logits, y)
            if not np.all(np.isfinite(value)):
                raise TrainingDiverged("non-finite training loss")
            total_loss += float(np.sum(value))
            correct += int(np.sum(np.argmax(logits, axis=1) == y))
            _, grads = net.backward(cache, dlogits=dlogits / len(idx))
            for name, g in grads.items():
                velocity[name] = cfg.momentum * velocity[name] + g
                net.params[name] -= cfg.learning_rate * velocity[name]
        log.epoch_loss.append(total_loss / len(dataset))
        log.epoch_accuracy.append(correct / len(dataset))
    net.trained = True
    return net, log


def adversarial_train(net, dataset, cfg: TrainConfig):
    if cfg.adversarial is None:
        raise ValueError("adversarial_train needs cfg.adversarial")
    return train(net, dataset, cfg)


def evaluate(net, dataset, chunk=512):
    """Accuracy and per-sample correctness mask."""
    if len(dataset) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    pred = np.concatenate([np.argmax(net.logits(dataset.images[i : i + chunk]), axis=1)
                           for i in range(0, len(dataset), chunk)])
    mask = pred == dataset.labels
    return float(mask.mean()), mask
