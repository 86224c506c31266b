"""Images, datasets and file formats.

An image is a float64 array of shape ``(channels, height, width)`` with
intensities in [0, 1] (channel-planar, row-major).  Batches stack images
along a leading axis.  Bounds quoted on the 0-255 scale are divided by 255
before use.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

CIFAR_RECORD = 3073
CIFAR_SIDE = 32
NOISE_AMPLITUDE = 0.05
NOISE_BLOCK = 4
SHAPE_NAMES = ("square", "disk", "cross")


def check_image(x, *, name="image"):
    """Validate the image invariants and return a float64 view/copy."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ValueError(f"{name} must have shape (C, H, W) with C in (1, 3), got {x.shape}")
    if x.shape[1] < 1 or x.shape[2] < 1:
        raise ValueError(f"{name} has an empty spatial extent")
    if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return x


@dataclass(frozen=True)
class LabeledDataset:
    images: np.ndarray  # (N, C, H, W)
    labels: np.ndarray  # (N,) int64
    num_classes: int

    def __post_init__(self):
        images = np.asarray(self.images, dtype=np.float64)
        labels = np.asarray(self.labels, dtype=np.int64)
        if images.ndim != 4 and not (images.ndim == 1 and images.size == 0):
            raise ValueError(f"images must have shape (N, C, H, W), got {images.shape}")
        if len(images) != len(labels):
            raise ValueError("images and labels differ in length")
        if labels.size and (labels.min() < 0 or labels.max() >= self.num_classes):
            raise ValueError("label outside [0, num_classes)")
        if images.size and (images.min() < 0.0 or images.max() > 1.0):
            raise ValueError("image intensities must lie in [0, 1]")
        images.setflags(write=False)
        labels.setflags(write=False)
        object.__setattr__(self, "images", images)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return len(self.labels)

    @property
    def image_shape(self):
        return tuple(self.images.shape[1:])

    def subset(self, index):
        index = np.asarray(index)
        return LabeledDataset(self.images[index], self.labels[index], self.num_classes)

    def split(self, n_first):
        """Split into the first ``n_first`` samples and the rest."""
        return self.subset(np.arange(n_first)), self.subset(np.arange(n_first, len(self)))


def _render_mask(label, size, rng):
    centre_y, centre_x = rng.uniform(0.4, 0.6, size=2) * size
    half = rng.uniform(0.2, 0.3) * size
    coords = np.arange(size) + 0.5
    dy = coords[:, None] - centre_y
    dx = coords[None, :] - centre_x
    if label == 0:
        return (np.abs(dy) <= half) & (np.abs(dx) <= half)
    if label == 1:
        return dy**2 + dx**2 <= half**2
    bar = max(0.75, 0.35 * half)
    return ((np.abs(dx) <= half) & (np.abs(dy) <= bar)) | ((np.abs(dy) <= half) & (np.abs(dx) <= bar))


def synth_dataset(seed, count, size=16, channels=3):
    """Three-class toy set: filled square (0), disk (1), plus-cross (2).

    Each image has a random background and foreground colour; one random
    channel is forced to high contrast (background and foreground at opposite
    ends of the range) so every image has sharp edges.  Noise is uniform with
    amplitude 0.05, drawn once per 4x4 block, which leaves the interior of
    each background block exactly flat.  Sample ``k`` has label ``k % 3``.
    """
    if size < 8:
        raise ValueError(f"size must be >= 8 to render shapes, got {size}")
    if count < 1:
        raise ValueError("count must be >= 1")
    if channels not in (1, 3):
        raise ValueError("channels must be 1 or 3")
    rng = np.random.default_rng(seed)
    n = 3 * count
    images = np.empty((n, channels, size, size))
    labels = np.arange(n) % 3
    blocks = -(-size // NOISE_BLOCK)
    for k in range(n):
        mask = _render_mask(labels[k], size, rng)
        bg = rng.uniform(0.0, 1.0, channels)
        fg = rng.uniform(0.0, 1.0, channels)
        ch = rng.integers(channels)
        lo, hi = rng.uniform(0.0, 0.1), rng.uniform(0.9, 1.0)
        if rng.random() < 0.5:
            lo, hi = hi, lo
        bg[ch], fg[ch] = lo, hi
        base = np.where(mask[None], fg[:, None, None], bg[:, None, None])
        noise = rng.uniform(-NOISE_AMPLITUDE, NOISE_AMPLITUDE, (channels, blocks, blocks))
        noise = noise.repeat(NOISE_BLOCK, axis=1).repeat(NOISE_BLOCK, axis=2)[:, :size, :size]
        images[k] = np.clip(base + noise, 0.0, 1.0)
    return LabeledDataset(images, labels, 3)


def parse_cifar_binary(data: bytes):
    n, rest = divmod(len(data), CIFAR_RECORD)
    if rest:
        raise FormatError("truncated CIFAR record", offset=n * CIFAR_RECORD)
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels >= 10)
    if bad.size:
        raise FormatError(f"label byte {labels[bad[0]]} >= 10", offset=int(bad[0]) * CIFAR_RECORD)
    images = raw[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE) / 255.0
    return LabeledDataset(images, labels, 10)


def load_cifar_binary(path):
    """Read a CIFAR-10 binary batch (1 label byte + R, G, B planes per record)."""
    with open(path, "rb") as fh:
        return parse_cifar_binary(fh.read())


def encode_ppm(image) -> bytes:
    x = check_image(image)
    c, h, w = x.shape
    magic = b"P6" if c == 3 else b"P5"
    pixels = np.rint(x * 255.0).astype(np.uint8).transpose(1, 2, 0)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def _header_tokens(data, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos : pos + 1] == b"#":
            while pos < len(data) and data[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise FormatError("unexpected end of header", offset=pos)
        tokens.append(data[start:pos])
    if pos >= len(data) or not data[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after header", offset=pos)
    return tokens, pos + 1


def decode_ppm(data: bytes):
    if data[:2] not in (b"P6", b"P5"):
        raise FormatError("bad magic, expected P6 or P5", offset=0)
    channels = 3 if data[:2] == b"P6" else 1
    (width, height, maxval), pos = _header_tokens(data[2:], 3)
    pos += 2
    try:
        width, height, maxval = int(width), int(height), int(maxval)
    except ValueError:
        raise FormatError("non-integer header field") from None
    if width < 1 or height < 1:
        raise FormatError("non-positive image size")
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}, only 255 is accepted")
    need = width * height * channels
    if len(data) - pos < need:
        raise FormatError("pixel data truncated", offset=len(data))
    pixels = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return pixels.reshape(height, width, channels).transpose(2, 0, 1) / 255.0


def save_ppm(image, path):
    """Write P6 (3 channels) or P5 (1 channel), quantizing by round(v * 255)."""
    with open(path, "wb") as fh:
        fh.write(encode_ppm(image))


def load_ppm(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def diff_image(original, perturbed, gain=5.0):
    """0.5 + gain * (perturbed - original), clamped to [0, 1]."""
    original = np.asarray(original, dtype=np.float64)
    perturbed = np.asarray(perturbed, dtype=np.float64)
    if original.shape != perturbed.shape:
        raise ValueError(f"shape mismatch: {original.shape} vs {perturbed.shape}")
    return np.clip(0.5 + gain * (perturbed - original), 0.0, 1.0)


def load_dataset_spec(spec, *, seed=1, count=100, size=16):
    """Resolve a CLI data spec: ``synth`` or ``cifar:<path>``."""
    if spec == "synth":
        return synth_dataset(seed, count, size)
    if spec.startswith("cifar:"):
        path = spec[len("cifar:") :]
        if not os.path.exists(path):
            raise FileNotFoundError(path)
        return load_cifar_binary(path)
    raise ValueError(f"unknown data spec {spec!r}; use 'synth' or 'cifar:<path>'")
