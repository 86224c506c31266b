"""Local-contrast analysis of flow versus additive perturbations.

For a reference pixel ``x00`` and one of its four quadrants, a flow with
fractional offsets ``(eh, ev)`` in ``[0, eps]^2`` produces the bilinear value
:func:`flow_value`.  Pixels whose 8-neighbourhood varies by less than
``delta / (2 eps)`` cannot be moved by ``delta`` with such a flow (low
contrast); pixels with an axis neighbour at least ``delta / eps`` away can be
moved by more than ``delta`` (high contrast).  One pixel of each kind gives an
image reachable by delta + flow but by neither alone.

``eps`` here is a fraction of a pixel in [0, 1]; :func:`eps_from_pixels`
converts a flow bound in pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NoWitness, OutOfDomain

LOW, HIGH, NEITHER = 1, 2, 0
GRID_POINTS = 101
QUADRANTS = ((1, 1), (1, -1), (-1, 1), (-1, -1))  # (horizontal step, vertical step)


def eps_from_pixels(bound):
    return min(float(bound), 1.0)


def _plane(image, channel):
    image = np.asarray(image, dtype=np.float64)
    return image if image.ndim == 2 else image[channel]


def _interior(plane, pixel):
    r, c = pixel
    h, w = plane.shape
    if not (1 <= r < h - 1 and 1 <= c < w - 1):
        raise OutOfDomain(f"pixel {pixel} is not interior to a {h}x{w} image")
    return r, c


def c_max(image, pixel, channel=0):
    """Largest absolute difference to any of the 8 neighbours."""
    plane = _plane(image, channel)
    r, c = _interior(plane, pixel)
    return float(np.max(np.abs(plane[r - 1 : r + 2, c - 1 : c + 2] - plane[r, c])))


def e_max(image, pixel, channel=0):
    """Largest absolute difference to the 4 axis neighbours."""
    plane = _plane(image, channel)
    r, c = _interior(plane, pixel)
    ref = plane[r, c]
    return float(max(abs(plane[r - 1, c] - ref), abs(plane[r + 1, c] - ref),
                     abs(plane[r, c - 1] - ref), abs(plane[r, c + 1] - ref)))


def flow_value(x00, x10, x01, x11, eh, ev):
    """Bilinear value inside one quadrant; ``x10`` is the horizontal and ``x01`` the vertical neighbour."""
    eh = np.asarray(eh, dtype=np.float64)
    ev = np.asarray(ev, dtype=np.float64)
    if np.any((eh < 0) | (eh > 1) | (ev < 0) | (ev > 1)):
        raise ValueError("flow offsets must lie in [0, 1]")
    return x00 + (x10 - x00) * ((1 - ev) * eh) + (x01 - x00) * (ev * (1 - eh)) + (x11 - x00) * (ev * eh)


def two_stage_value(x00, x10, x01, x11, eh, ev):
    """Horizontal then vertical linear interpolation."""
    top = x00 * (1 - eh) + x10 * eh
    bottom = x01 * (1 - eh) + x11 * eh
    return (1 - ev) * top + ev * bottom


def quadrant(plane, r, c, sh, sv):
    return plane[r, c], plane[r, c + sh], plane[r + sv, c], plane[r + sv, c + sh]


def _contrast_maps(plane):
    """C_max and E_max for every interior pixel of one channel."""
    h, w = plane.shape
    ref = plane[1:-1, 1:-1]
    diffs = {}
    for dr in (-1, 0, 1):
        for dc in (-1, 0, 1):
            diffs[dr, dc] = np.abs(plane[1 + dr : h - 1 + dr, 1 + dc : w - 1 + dc] - ref)
    cm = np.max(np.stack(list(diffs.values())), axis=0)
    em = np.max(np.stack([diffs[-1, 0], diffs[1, 0], diffs[0, -1], diffs[0, 1]]), axis=0)
    return cm, em


def _reach_weights(eps, points=GRID_POINTS):
    t = np.linspace(0.0, eps, points)
    eh, ev = np.meshgrid(t, t, indexing="ij")
    eh, ev = eh.ravel(), ev.ravel()
    # coefficients of (x10 - x00, x01 - x00, x11 - x00)
    return np.stack([(1 - ev) * eh, ev * (1 - eh), ev * eh])


def _reach_maps(plane, eps, points=GRID_POINTS):
    """Grid-oracle flow reach for every interior pixel: max |flow_value - x00| over 4 quadrants."""
    h, w = plane.shape
    ref = plane[1:-1, 1:-1].ravel()
    weights = _reach_weights(eps, points)
    best = np.zeros(ref.shape)
    corner_best = np.zeros(ref.shape)
    corners = _reach_weights(eps, 2)
    for sh, sv in QUADRANTS:
        d10 = plane[1:-1, 1 + sh : w - 1 + sh].ravel() - ref
        d01 = plane[1 + sv : h - 1 + sv, 1:-1].ravel() - ref
        d11 = plane[1 + sv : h - 1 + sv, 1 + sh : w - 1 + sh].ravel() - ref
        diffs = np.stack([d10, d01, d11], axis=1)
        best = np.maximum(best, np.max(np.abs(diffs @ weights), axis=1))
        corner_best = np.maximum(corner_best, np.max(np.abs(diffs @ corners), axis=1))
    return best.reshape(h - 2, w - 2), corner_best.reshape(h - 2, w - 2)


def flow_reach_bound(image, pixel, channel=0, eps=1.0, points=GRID_POINTS):
    """Largest change a flow of at most ``eps`` (fraction of a pixel) can make at ``pixel``.

    Brute force over a ``points x points`` grid of offsets in every quadrant.
    Asserts the bilinear corner maximum agrees and that the result respects
    ``2 * eps * c_max``.
    """
    if not 0.0 <= eps <= 1.0:
        raise ValueError("eps must lie in [0, 1]")
    plane = _plane(image, channel)
    r, c = _interior(plane, pixel)
    window = plane[r - 1 : r + 2, c - 1 : c + 2]
    grid, corners = _reach_maps(window, eps, points)
    value = float(grid[0, 0])
    assert abs(value - float(corners[0, 0])) <= 1e-12, "bilinear extremum must sit at a corner"
    assert value <= 2.0 * eps * c_max(plane, (r, c)) + 1e-12, "flow reach exceeds 2*eps*C_max"
    return value


@dataclass
class ContrastMask:
    """Per-channel, per-pixel classification (LOW / HIGH / NEITHER codes); borders are NEITHER."""

    labels: np.ndarray  # (C, H, W) int8
    delta: float
    eps: float

    @property
    def low_fraction(self):
        return float(np.mean(self.labels == LOW))

    @property
    def high_fraction(self):
        return float(np.mean(self.labels == HIGH))

    @property
    def neither_fraction(self):
        return float(np.mean(self.labels == NEITHER))


def classify_contrast(image, delta, eps):
    """LOW where ``C_max < delta / (2 eps)``, HIGH where ``E_max >= delta / eps``, per channel."""
    if not eps > 0:
        raise ValueError("eps must be positive")
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    c, h, w = image.shape
    labels = np.zeros((c, h, w), dtype=np.int8)
    if h < 3 or w < 3:
        return ContrastMask(labels, delta, eps)
    for ch in range(c):
        cm, em = _contrast_maps(image[ch])
        low = cm < delta / (2 * eps)
        high = em >= delta / eps
        inner = labels[ch, 1:-1, 1:-1]
        inner[low] = LOW
        inner[high & ~low] = HIGH
        # both at once would contradict E_max <= C_max
        if np.any(low & high):
            raise AssertionError("low and high contrast conditions overlap")
    return ContrastMask(labels, delta, eps)


def disjointness_violations(image, delta, eps):
    """Count pixels meeting both conditions, recomputed independently of ``classify_contrast``."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    total = 0
    for plane in image:
        if min(plane.shape) < 3:
            continue
        cm, em = _contrast_maps(plane)
        total += int(np.sum((cm < delta / (2 * eps)) & (em >= delta / eps)))
    return total


@dataclass
class TheoremCertificate:
    p: tuple  # (row, col) low-contrast pixel
    p_channel: int
    q: tuple  # (row, col) high-contrast pixel
    q_channel: int
    witness: np.ndarray
    change_p: float
    change_q: float
    flow_bound_p: float
    delta: float
    eps: float

    @property
    def holds(self):
        return self.change_p > self.flow_bound_p and self.change_q > self.delta

    def to_json(self):
        return {
            "p": list(self.p), "p_channel": self.p_channel,
            "q": list(self.q), "q_channel": self.q_channel,
            "delta": self.delta, "eps": self.eps,
            "change_p": self.change_p, "change_q": self.change_q,
            "flow_bound_p": self.flow_bound_p,
            "margin_p": self.change_p - self.flow_bound_p,
            "margin_q": self.change_q - self.delta,
            "holds": bool(self.holds),
        }


def theorem_witness(image, delta, eps):
    """Construct an image reachable by delta + flow but by neither alone.

    Adds ``+-delta`` at the flattest low-contrast pixel ``p`` and flows the
    most contrasted high-contrast pixel ``q`` by ``eps`` toward its largest
    axis neighbour.  Both strict inequalities are checked against the grid
    oracle before returning.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    mask = classify_contrast(image, delta, eps)
    c, h, w = image.shape
    cms, ems = [], []
    for ch in range(c):
        if h >= 3 and w >= 3:
            cm, em = _contrast_maps(image[ch])
        else:
            cm = em = np.zeros((0, 0))
        cms.append(cm)
        ems.append(em)
    low = np.argwhere(mask.labels == LOW)
    high = np.argwhere(mask.labels == HIGH)
    if len(high) == 0:
        raise NoWitness("no high-contrast pixel")
    if len(low) == 0:
        raise NoWitness("no low-contrast pixel")
    q_ch, qr, qc = max(high.tolist(), key=lambda t: (ems[t[0]][t[1] - 1, t[2] - 1], [-v for v in t]))
    # p and q must be different pixel locations (a Low channel can share coordinates with q)
    low = [t for t in low.tolist() if (t[1], t[2]) != (qr, qc)]
    if not low:
        raise NoWitness("no low-contrast pixel apart from the high-contrast pixel")
    p_ch, pr, pc = min(low, key=lambda t: (cms[t[0]][t[1] - 1, t[2] - 1], t))

    witness = image.copy()
    sign = 1.0 if image[p_ch, pr, pc] + delta <= 1.0 else -1.0
    witness[p_ch, pr, pc] = image[p_ch, pr, pc] + sign * delta

    plane = image[q_ch]
    ref = plane[qr, qc]
    neighbours = [(abs(plane[qr + dr, qc + dc] - ref), dr, dc) for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1))]
    _, dr, dc = max(neighbours, key=lambda t: t[0])
    if dr:
        x00, x10, x01, x11 = quadrant(plane, qr, qc, 1, dr)
        value = flow_value(x00, x10, x01, x11, 0.0, eps)
    else:
        x00, x10, x01, x11 = quadrant(plane, qr, qc, dc, 1)
        value = flow_value(x00, x10, x01, x11, eps, 0.0)
    witness[q_ch, qr, qc] = value

    change_p = abs(witness[p_ch, pr, pc] - image[p_ch, pr, pc])
    change_q = abs(value - ref)
    bound_p = flow_reach_bound(image, (pr, pc), p_ch, eps)
    cert = TheoremCertificate((pr, pc), int(p_ch), (qr, qc), int(q_ch), witness,
                              float(change_p), float(change_q), float(bound_p), float(delta), float(eps))
    if not cert.holds:
        raise NoWitness("high-contrast pixel sits exactly on the threshold; flow change does not exceed delta")
    return cert


def verify_certificate(image, cert: TheoremCertificate, points=GRID_POINTS):
    """Re-check a certificate from the images alone.

    At ``p`` the witness change must exceed the grid-oracle flow reach; at
    ``q`` it must exceed ``delta`` while being attainable by a flow of at
    most ``eps`` (found on the oracle grid to within one grid step).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[None]
    w = cert.witness
    dp = abs(w[cert.p_channel][cert.p] - image[cert.p_channel][cert.p])
    plane_p = image[cert.p_channel]
    r, c = cert.p
    reach_p, _ = _reach_maps(plane_p[r - 1 : r + 2, c - 1 : c + 2], cert.eps, points)
    dq = abs(w[cert.q_channel][cert.q] - image[cert.q_channel][cert.q])
    plane_q = image[cert.q_channel]
    r, c = cert.q
    reach_q, _ = _reach_maps(plane_q[r - 1 : r + 2, c - 1 : c + 2], cert.eps, points)
    changed = np.argwhere(w != image)
    only_two = all(tuple(t) in {(cert.p_channel,) + tuple(cert.p), (cert.q_channel,) + tuple(cert.q)} for t in changed)
    return bool(dp > reach_p[0, 0] and dq > cert.delta and dq <= reach_q[0, 0] + 1e-12 and only_two)


def contrast_scan(dataset, delta, eps, sample_count=None, seed=0):
    """Low/high contrast fractions for a seeded random sample of images.

    ``dataset`` is a :class:`LabeledDataset` or an image array (N, C, H, W).

    Returns rows ``(image_index, low_fraction, high_fraction)`` and whether
    every sampled image has at least one pixel of each kind.
    """
    images = getattr(dataset, "images", dataset)
    n = len(images)
    if n == 0:
        raise ValueError("contrast_scan needs a non-empty dataset")
    sample_count = n if sample_count is None else sample_count
    if sample_count > n:
        raise ValueError("sample_count exceeds dataset size")
    picks = np.sort(np.random.default_rng(seed).choice(n, size=sample_count, replace=False))
    rows = []
    for i in picks:
        mask = classify_contrast(images[i], delta, eps)
        rows.append((int(i), mask.low_fraction, mask.high_fraction))
    every = all(lo > 0 and hi > 0 for _, lo, hi in rows)
    return rows, every
