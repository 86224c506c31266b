"""Attack drivers: FGSM, PGD with Adam over composed layers, and a perceptual CW variant.

All drivers work on batches; each sample has its own optimizer state and
stopping point, so a sample's result does not depend on the rest of the
batch beyond floating-point summation order.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import losses
from .errors import AttackDiverged
from .layers import SequentialPerturbation, identity_params, sequential_forward, sequential_vjp
from .metrics import lpips_style, perceptual_distance_grad, ssim
from .metrics import MetricReport, lp_distance
from .threat import DeltaThreat, FlowThreat, contains, default_threats, project, threat_from_json, threat_to_json

CHUNK = 512


@dataclass(frozen=True)
class LayerConfig:
    kind: str
    threat: object
    lr: Optional[float] = None

    def __post_init__(self):
        if self.kind != self.threat.kind:
            raise ValueError(f"layer kind {self.kind!r} does not match threat {type(self.threat).__name__}")
        if self.lr is not None and not self.lr > 0:
            raise ValueError("layer lr must be positive")


@dataclass(frozen=True)
class AttackConfig:
    """Everything needed to reproduce one attack; see ``to_dict`` for the JSON field names."""

    name: str = "attack"
    layers: tuple = ()
    optimizer: str = "adam"  # or "fgsm"
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps_adam: float = 1e-8
    fgsm_step: float = 8 / 255
    min_iterations: int = 100
    max_iterations: int = 500
    window: int = 20
    tolerance: float = 1e-5
    loss: str = "cw_f6"  # or "cross_entropy"
    kappa: float = 0.0
    tv_weight: float = 0.05
    warm_start: bool = True
    perceptual_metric: Optional[str] = None  # "lpips_style" | "ssim" switches to the perceptual CW objective
    lam: float = 10.0
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        if self.optimizer not in ("adam", "fgsm"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in ("cw_f6", "cross_entropy"):
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.min_iterations < 1 or self.max_iterations < self.min_iterations:
            raise ValueError("need 1 <= min_iterations <= max_iterations")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.tv_weight < 0 or self.lam < 0 or self.window < 1:
            raise ValueError("weights must be >= 0 and window >= 1")
        if self.perceptual_metric not in (None, "lpips_style", "ssim"):
            raise ValueError(f"unknown perceptual metric {self.perceptual_metric!r}")
        if self.optimizer == "fgsm" and [l.kind for l in self.layers] != ["delta"]:
            raise ValueError("fgsm needs exactly one delta layer")

    @property
    def kinds(self):
        return [layer.kind for layer in self.layers]

    def to_dict(self):
        doc = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "layers"}
        doc["layers"] = [{"kind": l.kind, "threat": threat_to_json(l.threat), "lr": l.lr} for l in self.layers]
        return doc

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        unknown = set(doc) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown attack config fields: {sorted(unknown)}")
        layers = [LayerConfig(l["kind"], threat_from_json(l["threat"]), l.get("lr")) for l in doc.pop("layers", [])]
        return cls(layers=tuple(layers), **doc)

    def key(self):
        """Identity of the computation (the name is a label only)."""
        doc = self.to_dict()
        doc.pop("name")
        return json.dumps(doc, sort_keys=True)

    def single_layer(self, i):
        return replace(self, name=f"{self.name}[{self.layers[i].kind}]", layers=(self.layers[i],))


@dataclass
class AttackResult:
    """One attacked sample."""

    original: np.ndarray
    perturbed: np.ndarray
    label: int
    kinds: list
    params: list
    success: bool
    iterations: int
    final_loss: float
    metrics: MetricReport

    def to_json(self):
        return {
            "label": self.label,
            "layer_order": list(self.kinds),
            "params": [p.to_json() for p in self.params],
            "success": bool(self.success),
            "iterations": int(self.iterations),
            "final_loss": float(self.final_loss),
            "metrics": {k: float(v) for k, v in self.metrics.to_dict().items()},
        }


@dataclass
class BatchResult:
    perturbed: np.ndarray  # (N, C, H, W)
    kinds: list
    params: list  # batched params per layer
    success: np.ndarray
    iterations: np.ndarray
    loss: np.ndarray

    def sample(self, i, net, x, label):
        return AttackResult(
            original=x,
            perturbed=self.perturbed[i],
            label=int(label),
            kinds=list(self.kinds),
            params=[p.take(i) for p in self.params],
            success=bool(self.success[i]),
            iterations=int(self.iterations[i]),
            final_loss=float(self.loss[i]),
            metrics=_report(net, x, self.perturbed[i]),
        )


def _report(net, x, y):
    lp = lpips_style(net, x, y) if getattr(net, "trained", False) and hasattr(net, "activations") else float("nan")
    s = ssim(x, y) if min(np.shape(x)[-2:]) >= 8 else float("nan")
    return MetricReport(lp_distance(x, y, np.inf), lp_distance(x, y, 2), s, lp)


# -- objective ---------------------------------------------------------------


class _Objective:
    """Attack objective to be minimized, with gradients for every layer's parameters."""

    def __init__(self, net, x, labels, cfg: AttackConfig):
        self.net, self.x, self.labels, self.cfg = net, x, labels, cfg

    def __call__(self, params, need_grad=True):
        cfg = self.cfg
        seq = SequentialPerturbation(list(zip(cfg.kinds, params)))
        img, inputs = sequential_forward(self.x, seq, keep_inputs=True)
        logits, cache = self.net.forward(img)
        if cfg.loss == "cw_f6":
            adv, dlogits = losses.cw_f6(logits, self.labels, cfg.kappa)
        else:
            adv, dlogits = losses.cross_entropy(logits, self.labels)
            adv, dlogits = -adv, -dlogits
        success = np.argmax(logits, axis=1) != self.labels
        if cfg.perceptual_metric is not None:
            dist, ddist = perceptual_distance_grad(cfg.perceptual_metric, self.net, self.x, img)
            value = dist + cfg.lam * adv
            dlogits = cfg.lam * dlogits
            select = dist
        else:
            value = adv.copy()
            ddist = None
            select = None
        tv_terms = []
        for i, (kind, p) in enumerate(seq.layers):
            if kind == "flow" and cfg.tv_weight > 0:
                tv, tv_grad = losses.tv_flow_loss(p.u, p.v)
                value = value + cfg.tv_weight * tv
                tv_terms.append((i, tv_grad))
        if select is None:
            select = value
        if not need_grad:
            return value, select, success, img, None
        dimg, _ = self.net.backward(cache, dlogits=dlogits, need_params=False)
        if ddist is not None:
            dimg = dimg + ddist
        grads, _ = sequential_vjp(self.x, seq, dimg, inputs=inputs)
        for i, (gu, gv) in tv_terms:
            grads[i] = grads[i].replace(u=grads[i].u + cfg.tv_weight * gu, v=grads[i].v + cfg.tv_weight * gv)
        return value, select, success, img, grads


def _better(success, score, best_success, best_score):
    """Successful iterates beat unsuccessful ones; ties in status are broken by lower score."""
    return (success & ~best_success) | ((success == best_success) & (score < best_score))


def _project_all(params, cfg):
    return [project(p, layer.threat) for p, layer in zip(params, cfg.layers)]


def _pgd_batch(net, x, labels, cfg: AttackConfig, init=None):
    n = len(x)
    if init is None:
        params = [identity_params(kind, x.shape[1:], batch=n) for kind in cfg.kinds]
    else:
        params = [p.copy() for p in init]
    params = _project_all(params, cfg)
    objective = _Objective(net, x, labels, cfg)

    value, select, success, img, grads = objective(params)
    if not np.all(np.isfinite(value)):
        raise AttackDiverged("non-finite attack objective at the initial iterate", params)
    best_params = [p.copy() for p in params]
    best_img = img.copy()
    best_success, best_score, best_value = success.copy(), select.copy(), value.copy()
    running_min = [value.copy()]
    active = np.ones(n, dtype=bool)
    iterations = np.zeros(n, dtype=np.int64)
    if not cfg.layers:
        return BatchResult(best_img, [], [], best_success, iterations, best_value)

    m = [{k: np.zeros_like(a) for k, a in p.arrays().items()} for p in params]
    v = [{k: np.zeros_like(a) for k, a in p.arrays().items()} for p in params]
    for step in range(1, cfg.max_iterations + 1):
        c1 = 1.0 - cfg.beta1**step
        c2 = 1.0 - cfg.beta2**step
        new_params = []
        for li, (p, g) in enumerate(zip(params, grads)):
            lr = cfg.layers[li].lr or cfg.lr
            arrays = p.arrays()
            updated = {}
            for k, a in arrays.items():
                gk = getattr(g, k)
                m[li][k] = np.where(_rows(active, a), cfg.beta1 * m[li][k] + (1 - cfg.beta1) * gk, m[li][k])
                v[li][k] = np.where(_rows(active, a), cfg.beta2 * v[li][k] + (1 - cfg.beta2) * gk * gk, v[li][k])
                stepped = a - lr * (m[li][k] / c1) / (np.sqrt(v[li][k] / c2) + cfg.eps_adam)
                updated[k] = np.where(_rows(active, a), stepped, a)
            new_params.append(type(p)(**updated))
        params = _project_all(new_params, cfg)
        iterations[active] = step

        value, select, success, img, grads = objective(params)
        if not np.all(np.isfinite(value[active])):
            raise AttackDiverged(f"non-finite attack objective at iteration {step}", best_params)
        improve = active & _better(success, select, best_success, best_score)
        if np.any(improve):
            idx = np.flatnonzero(improve)
            for bp, p in zip(best_params, params):
                bp.put(idx, p.take(idx))
            best_img[idx] = img[idx]
            best_success[idx] = success[idx]
            best_score[idx] = select[idx]
            best_value[idx] = value[idx]
        running_min.append(np.where(active, np.minimum(running_min[-1], value), running_min[-1]))
        if step >= cfg.min_iterations and step >= cfg.window:
            stalled = running_min[step - cfg.window] - running_min[step] <= cfg.tolerance
            active &= ~stalled
        if not np.any(active):
            break
    return BatchResult(best_img, list(cfg.kinds), best_params, best_success, iterations, best_value)


def _rows(mask, a):
    return mask.reshape((-1,) + (1,) * (np.ndim(a) - 1))


def _fgsm_batch(net, x, labels, cfg: AttackConfig):
    threat = cfg.layers[0].threat
    logits, cache = net.forward(x)
    _, dlogits = losses.cross_entropy(logits, labels)
    grad, _ = net.backward(cache, dlogits=dlogits, need_params=False)
    params = project(identity_params("delta", x.shape[1:], batch=len(x)).replace(delta=cfg.fgsm_step * np.sign(grad)), threat)
    img = np.clip(x + params.delta, 0.0, 1.0)
    adv_logits = net.logits(img)
    loss, _ = losses.cross_entropy(adv_logits, labels)
    success = np.argmax(adv_logits, axis=1) != labels
    return BatchResult(img, ["delta"], [params], success, np.ones(len(x), dtype=np.int64), -loss)


def _evaluate_init(net, x, labels, cfg, init):
    value, select, success, _, _ = _Objective(net, x, labels, cfg)(_project_all(init, cfg), need_grad=False)
    return value, select, success


def _warm_start(net, x, labels, cfg, memo):
    """Pick, per sample, the best single-layer solution embedded in the full layer stack."""
    candidates = []
    for i in range(len(cfg.layers)):
        sub = _run(net, x, labels, cfg.single_layer(i), memo)
        init = [identity_params(k, x.shape[1:], batch=len(x)) for k in cfg.kinds]
        init[i] = sub.params[0].copy()
        candidates.append(init)
    return _best_candidate(net, x, labels, cfg, candidates)


def _run(net, x, labels, cfg, memo):
    key = None
    if memo is not None:
        key = (cfg.key(), x.shape, hash(x.tobytes()), hash(labels.tobytes()))
        if key in memo:
            return memo[key]
    if cfg.optimizer == "fgsm":
        result = _fgsm_batch(net, x, labels, cfg)
    elif len(cfg.layers) > 1 and cfg.warm_start:
        result = _pgd_batch(net, x, labels, cfg, init=_warm_start(net, x, labels, cfg, memo))
    else:
        result = _pgd_batch(net, x, labels, cfg)
    if key is not None:
        memo[key] = result
    return result


def run_attack(net, x, labels, cfg: AttackConfig, init=None, memo=None):
    """Attack a batch ``x`` (N, C, H, W).

    Multi-layer configs with ``warm_start`` first run every layer alone and
    start from the better solution per sample.  ``init`` (per-layer batched
    params) overrides that.  ``memo`` caches results across calls.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 4 or len(labels) != len(x):
        raise ValueError("run_attack expects a batch (N, C, H, W) and N labels")
    if init is not None:
        return _pgd_batch(net, x, labels, cfg, init=init)
    if memo is None:
        memo = {}
    return _run(net, x, labels, cfg, memo)


def _best_candidate(net, x, labels, cfg, candidates):
    best = None
    for cand in candidates:
        init = _project_all([p.copy() for p in cand], cfg)
        _, score, success = _evaluate_init(net, x, labels, cfg, init)
        if best is None:
            best, best_success, best_score = init, success, score
            continue
        take = np.flatnonzero(_better(success, score, best_success, best_score))
        for b, p in zip(best, init):
            b.put(take, p.take(take))
        best_success[take] = success[take]
        best_score[take] = score[take]
    return best


def chained_attack(net, x, labels, cfg: AttackConfig, previous=(), memo=None):
    """PGD started from the best of the usual warm start and ``previous`` solutions.

    ``previous`` holds per-layer params found under tighter threats with the
    same layer order; feeding them in makes success monotone as bounds grow.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    memo = {} if memo is None else memo
    candidates = [list(c) for c in previous]
    if cfg.warm_start and len(cfg.layers) > 1:
        candidates.append(_warm_start(net, x, labels, cfg, memo))
    init = _best_candidate(net, x, labels, cfg, candidates) if candidates else None
    return _pgd_batch(net, x, labels, cfg, init=init)


def pgd(net, x, label, cfg: AttackConfig, init=None):
    """Single-image PGD; ``init`` is an optional list of per-layer params."""
    x = np.asarray(x, dtype=np.float64)
    if init is not None:
        init = [p.map(lambda a: np.asarray(a)[None]) for p in init]
    batch = run_attack(net, x[None], np.array([label]), cfg, init=init)
    return batch.sample(0, net, x, label)


def fgsm(net, x, label, threat=None, step=8 / 255):
    threat = threat if threat is not None else default_threats()["delta"]
    if not isinstance(threat, DeltaThreat):
        raise ValueError("fgsm needs a delta threat")
    cfg = AttackConfig(name="fgsm", layers=(LayerConfig("delta", threat),), optimizer="fgsm", fgsm_step=step)
    x = np.asarray(x, dtype=np.float64)
    return run_attack(net, x[None], np.array([label]), cfg).sample(0, net, x, label)


def perceptual_config(metric="lpips_style", lam=10.0, variant="delta", **overrides):
    """Unbounded perceptual CW config: ``variant`` is ``"delta"`` or ``"delta+flow"``."""
    delta = LayerConfig("delta", DeltaThreat(math.inf))
    if variant == "delta":
        layers = (delta,)
    elif variant == "delta+flow":
        layers = (LayerConfig("flow", FlowThreat(math.inf)), delta)
    else:
        raise ValueError(f"unknown variant {variant!r}")
    base = dict(name=f"perceptual_cw[{variant}]", layers=layers, perceptual_metric=metric, lam=lam, tv_weight=0.0)
    base.update(overrides)
    return AttackConfig(**base)


def perceptual_cw(net, x, label, metric="lpips_style", lam=10.0, variant="delta", **overrides):
    """Minimize ``metric(x, x') + lam * cw_f6`` over unbounded layers.

    Returns the successful iterate with the smallest metric, or the lowest
    objective iterate (``success=False``) when none succeeded.
    """
    cfg = perceptual_config(metric, lam, variant, **overrides)
    x = np.asarray(x, dtype=np.float64)
    return run_attack(net, x[None], np.array([label]), cfg).sample(0, net, x, label)


# -- suites ------------------------------------------------------------------


def identity_config():
    return AttackConfig(name="identity", layers=())


def builtin_configs(**overrides):
    """Named attacks mirroring the standard attack set; combined ones put spatial layers first.

    Every PGD attack also has a ``-ce`` variant that ascends cross-entropy
    instead of minimizing the CW margin.
    """
    t = default_threats()
    delta = LayerConfig("delta", t["delta"])
    rt = LayerConfig("affine", t["rotation_translation"], lr=0.05)
    flow = LayerConfig("flow", t["stadv"])
    table = {
        "identity": identity_config(),
        "fgsm": AttackConfig(name="fgsm", layers=(delta,), optimizer="fgsm"),
        "delta": AttackConfig(name="delta", layers=(delta,)),
        "rt": AttackConfig(name="rt", layers=(rt,)),
        "delta+rt": AttackConfig(name="delta+rt", layers=(rt, delta)),
        "stadv": AttackConfig(name="stadv", layers=(flow,)),
        "delta+stadv": AttackConfig(name="delta+stadv", layers=(flow, delta)),
    }
    # cross-entropy ascent twins, reported next to the CW-f6 columns
    for name in ("delta", "rt", "delta+rt", "stadv", "delta+stadv"):
        table[f"{name}-ce"] = replace(table[name], name=f"{name}-ce", loss="cross_entropy")
    if overrides:
        table = {k: (replace(c, **overrides) if c.layers and c.optimizer == "adam" else c) for k, c in table.items()}
    return table


@dataclass
class SuiteEntry:
    name: str
    defended_accuracy: float  # over correctly classified samples
    robust_accuracy: float  # over all samples: correct and not flipped
    attacked: int
    successes: int
    mean_metrics: dict = field(default_factory=dict)
    batch: Optional[BatchResult] = None


@dataclass
class SuiteResult:
    clean_accuracy: float
    correct_mask: np.ndarray
    entries: dict

    def row(self):
        return {name: e.robust_accuracy for name, e in self.entries.items()}


def _mean_metrics(net, x, batch):
    ok = np.flatnonzero(batch.success)
    if ok.size == 0:
        return {"linf": 0.0, "l2": 0.0, "one_minus_ssim": 0.0, "lpips_style": 0.0}
    xs, ys = x[ok], batch.perturbed[ok]
    out = {
        "linf": float(np.mean(lp_distance(xs, ys, np.inf))),
        "l2": float(np.mean(lp_distance(xs, ys, 2))),
        "one_minus_ssim": float(np.mean(1.0 - np.atleast_1d(ssim(xs, ys)))),
    }
    out["lpips_style"] = float(np.mean(lpips_style(net, xs, ys))) if getattr(net, "trained", False) else float("nan")
    return out


def attack_suite(net, dataset, configs, memo=None, keep_batches=False):
    """Run each named config on every correctly classified sample.

    ``defended_accuracy`` is the fraction of attacked samples that were not
    flipped; ``robust_accuracy`` also counts initially misclassified samples
    as failures, so the identity attack reproduces clean accuracy.
    """
    if len(dataset) == 0:
        raise ValueError("attack_suite needs a non-empty dataset")
    from .classifier import evaluate

    clean, mask = evaluate(net, dataset)
    idx = np.flatnonzero(mask)
    x, y = dataset.images[idx], dataset.labels[idx]
    memo = {} if memo is None else memo
    entries = {}
    for name, cfg in configs.items():
        parts = [run_attack(net, x[i : i + CHUNK], y[i : i + CHUNK], cfg, memo=memo) for i in range(0, len(x), CHUNK)]
        batch = _concat(parts, x) if parts else None
        successes = int(batch.success.sum()) if batch is not None else 0
        attacked = len(idx)
        defended = 1.0 - successes / attacked if attacked else 1.0
        entries[name] = SuiteEntry(
            name=name,
            defended_accuracy=defended,
            robust_accuracy=(attacked - successes) / len(dataset),
            attacked=attacked,
            successes=successes,
            mean_metrics=_mean_metrics(net, x, batch) if batch is not None else {},
            batch=batch if keep_batches else None,
        )
    return SuiteResult(clean, mask, entries)


def _concat(parts, x):
    if len(parts) == 1:
        return parts[0]
    params = []
    for li in range(len(parts[0].params)):
        first = parts[0].params[li]
        params.append(type(first)(**{k: np.concatenate([getattr(p.params[li], k) for p in parts])
                                     for k in first.arrays()}))
    return BatchResult(
        np.concatenate([p.perturbed for p in parts]),
        parts[0].kinds,
        params,
        np.concatenate([p.success for p in parts]),
        np.concatenate([p.iterations for p in parts]),
        np.concatenate([p.loss for p in parts]),
    )


def check_feasible(batch: BatchResult, cfg: AttackConfig):
    """True when every sample's params satisfy every layer's threat model."""
    return all(contains(p, layer.threat) for p, layer in zip(batch.params, cfg.layers))
