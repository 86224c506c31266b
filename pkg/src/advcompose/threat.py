"""Per-layer hard-constraint threat models and Euclidean projection onto them."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .layers import AffineParams, DeltaParams, FlowParams


def _check_bounds(spec):
    for name, value in asdict(spec).items():
        if not value >= 0:
            raise ValueError(f"{type(spec).__name__}.{name} must be >= 0, got {value}")


@dataclass(frozen=True)
class DeltaThreat:
    linf_bound: float
    kind = "delta"

    def __post_init__(self):
        _check_bounds(self)


@dataclass(frozen=True)
class AffineThreat:
    max_angle: float = 0.0
    max_shift: float = 0.0
    max_log_scale: float = 0.0
    kind = "affine"

    def __post_init__(self):
        _check_bounds(self)


@dataclass(frozen=True)
class FlowThreat:
    max_disp: float
    kind = "flow"

    def __post_init__(self):
        _check_bounds(self)


THREAT_TYPES = {"delta": DeltaThreat, "affine": AffineThreat, "flow": FlowThreat}
_PARAM_FOR = {DeltaThreat: DeltaParams, AffineThreat: AffineParams, FlowThreat: FlowParams}


def _matching(params, spec):
    expected = _PARAM_FOR.get(type(spec))
    if expected is None or not isinstance(params, expected):
        raise ValueError(f"{type(params).__name__} cannot be checked against {type(spec).__name__}")


def project(params, spec):
    """Nearest feasible params (per-coordinate clamp); idempotent."""
    _matching(params, spec)
    if isinstance(spec, DeltaThreat):
        b = spec.linf_bound
        return DeltaParams(np.clip(params.delta, -b, b))
    if isinstance(spec, FlowThreat):
        b = spec.max_disp
        return FlowParams(np.clip(params.u, -b, b), np.clip(params.v, -b, b))
    scale = np.asarray(params.scale, dtype=np.float64)
    if np.any(~(scale > 0)):
        raise ValueError("scale must be positive")
    log_scale = np.log(scale)
    clipped = np.clip(log_scale, -spec.max_log_scale, spec.max_log_scale)
    # leave feasible scales untouched so exp(log(s)) rounding cannot break idempotence
    scale = np.where(clipped == log_scale, scale, np.exp(clipped))
    return AffineParams(
        np.clip(params.angle, -spec.max_angle, spec.max_angle),
        np.clip(params.shift_x, -spec.max_shift, spec.max_shift),
        np.clip(params.shift_y, -spec.max_shift, spec.max_shift),
        scale,
    )


def contains(params, spec, tol=1e-12):
    projected = project(params, spec)
    return all(
        np.all(np.abs(a - b) <= tol) for a, b in zip(params.arrays().values(), projected.arrays().values())
    )


def default_threats():
    """Named threat models; 0-255 intensity bounds converted to [0, 1]."""
    return {
        "delta": DeltaThreat(8 / 255),
        "rotation": AffineThreat(max_angle=math.pi / 24),
        "translation": AffineThreat(max_shift=3.2),
        "rotation_translation": AffineThreat(max_angle=math.pi / 24, max_shift=3.2),
        "stadv": FlowThreat(1.6),
    }


def threat_to_json(spec):
    """Unbounded (infinite) bounds are written as null."""
    return {"kind": spec.kind, **{k: (None if math.isinf(v) else v) for k, v in asdict(spec).items()}}


def threat_from_json(doc):
    doc = dict(doc)
    kind = doc.pop("kind", None)
    if kind not in THREAT_TYPES:
        raise ValueError(f"unknown threat kind {kind!r}")
    return THREAT_TYPES[kind](**{k: (math.inf if v is None else float(v)) for k, v in doc.items()})


def is_looser(a, b):
    """True if every bound of ``b`` is >= the matching bound of ``a`` (same variant)."""
    if type(a) is not type(b):
        return False
    return all(asdict(b)[k] >= v for k, v in asdict(a).items())
