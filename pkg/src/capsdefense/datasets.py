"""Dataset ingestion and the synthetic 10-class glyph set used for fast runs.

All loaders emit N x C x H x W float32 images scaled to [0, 1].
"""

from __future__ import annotations

import os
import struct
import zlib
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, UsageError

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] == 0:
            raise UsageError("dataset must contain at least one sample")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise FormatError("label out of range for declared class count")

    def __len__(self):
        return self.images.shape[0]

    @property
    def image_shape(self):
        return self.images.shape[1:]


class BatchIterator:
    """Seeded epoch shuffler; every epoch is a permutation of all indices."""

    def __init__(self, dataset: Dataset, batch_size: int, seed: int = 0):
        self.dataset = dataset
        self.batch_size = batch_size
        self.seed = seed
        self.epoch = 0

    def epoch_order(self, epoch: int | None = None) -> np.ndarray:
        e = self.epoch if epoch is None else epoch
        rng = np.random.default_rng((self.seed, e))
        return rng.permutation(len(self.dataset))

    def __iter__(self):
        order = self.epoch_order()
        for start in range(0, len(order), self.batch_size):
            idx = order[start : start + self.batch_size]
            yield self.dataset.images[idx], self.dataset.labels[idx]
        self.epoch += 1


def load_cifar10_binary(path: str) -> Dataset:
    """Load one CIFAR-10 binary batch file (3073-byte records)."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
        raise FormatError(
            f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD} "
            f"(truncated at byte {len(raw) - len(raw) % CIFAR_RECORD})"
        )
    arr = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = arr[:, 0].astype(np.int64)
    if labels.max() > 9:
        raise FormatError(f"{path}: label byte {labels.max()} exceeds 9")
    images = arr[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return Dataset(images, labels, split=os.path.basename(path))


def load_idx(images_path: str, labels_path: str, channels: int = 1) -> Dataset:
    """Load an IDX image/label file pair (big-endian, magics 0x803/0x801)."""
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != 0x00000803:
            raise FormatError(f"{images_path}: bad IDX image magic {magic:#010x}")
        pixels = np.frombuffer(f.read(), dtype=np.uint8)
    if pixels.size != n * rows * cols:
        raise FormatError(f"{images_path}: expected {n * rows * cols} pixels, got {pixels.size}")
    with open(labels_path, "rb") as f:
        magic, nl = struct.unpack(">II", f.read(8))
        if magic != 0x00000801:
            raise FormatError(f"{labels_path}: bad IDX label magic {magic:#010x}")
        labels = np.frombuffer(f.read(), dtype=np.uint8)
    if labels.size != nl:
        raise FormatError(f"{labels_path}: expected {nl} labels, got {labels.size}")
    if n != nl:
        raise FormatError(f"image count {n} != label count {nl}")
    images = pixels.reshape(n, 1, rows, cols).astype(np.float32) / 255.0
    if channels > 1:
        images = np.repeat(images, channels, axis=1)
    return Dataset(images, labels.astype(np.int64), split=os.path.basename(images_path))


# -- synthetic glyph data -----------------------------------------------------

# Stroke endpoints on a unit square, one distinct pattern per class.
_GLYPH_STROKES = [
    [(0.2, 0.2, 0.8, 0.2), (0.8, 0.2, 0.8, 0.8), (0.8, 0.8, 0.2, 0.8), (0.2, 0.8, 0.2, 0.2)],
    [(0.5, 0.15, 0.5, 0.85)],
    [(0.2, 0.2, 0.8, 0.2), (0.8, 0.2, 0.2, 0.8), (0.2, 0.8, 0.8, 0.8)],
    [(0.2, 0.2, 0.8, 0.5), (0.8, 0.5, 0.2, 0.8)],
    [(0.3, 0.15, 0.3, 0.5), (0.3, 0.5, 0.75, 0.5), (0.7, 0.15, 0.7, 0.85)],
    [(0.8, 0.2, 0.2, 0.2), (0.2, 0.2, 0.2, 0.5), (0.2, 0.5, 0.8, 0.65), (0.8, 0.65, 0.2, 0.85)],
    [(0.7, 0.2, 0.3, 0.5), (0.3, 0.5, 0.3, 0.8), (0.3, 0.8, 0.7, 0.8), (0.7, 0.8, 0.7, 0.55)],
    [(0.2, 0.2, 0.8, 0.2), (0.8, 0.2, 0.35, 0.85)],
    [(0.3, 0.3, 0.7, 0.7), (0.7, 0.3, 0.3, 0.7), (0.2, 0.5, 0.8, 0.5)],
    [(0.5, 0.5, 0.2, 0.2), (0.5, 0.5, 0.8, 0.2), (0.5, 0.5, 0.5, 0.85)],
]


def _render_glyph(strokes, size, shift_x, shift_y, brightness):
    img = np.zeros((size, size), dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    thickness = max(size / 16.0, 1.0)
    for x0, y0, x1, y1 in strokes:
        ax, ay = x0 * (size - 1) + shift_x, y0 * (size - 1) + shift_y
        bx, by = x1 * (size - 1) + shift_x, y1 * (size - 1) + shift_y
        dx, dy = bx - ax, by - ay
        L2 = dx * dx + dy * dy
        if L2 == 0:
            dist = np.hypot(xx - ax, yy - ay)
        else:
            t = np.clip(((xx - ax) * dx + (yy - ay) * dy) / L2, 0.0, 1.0)
            dist = np.hypot(xx - (ax + t * dx), yy - (ay + t * dy))
        img = np.maximum(img, np.clip(1.0 - dist / thickness, 0.0, 1.0))
    return np.clip(img * brightness, 0.0, 1.0)


def synth_toy(seed: int, per_class: int, size: int = 20, split: str = "train") -> Dataset:
    """Deterministic 10-class glyph dataset with translation/brightness jitter."""
    if size < 12:
        raise UsageError(f"synth_toy needs size >= 12, got {size}")
    rng = np.random.default_rng((seed, zlib.crc32(split.encode())))
    images = np.empty((10 * per_class, 1, size, size), dtype=np.float32)
    labels = np.empty(10 * per_class, dtype=np.int64)
    i = 0
    for cls in range(10):
        for _ in range(per_class):
            sx, sy = rng.uniform(-2.0, 2.0, size=2)
            bright = 1.0 + rng.uniform(-0.1, 0.1)
            images[i, 0] = _render_glyph(_GLYPH_STROKES[cls], size, sx, sy, bright)
            labels[i] = cls
            i += 1
    order = rng.permutation(10 * per_class)
    return Dataset(images[order], labels[order], split=split)


def save_idx(dataset: Dataset, images_path: str, labels_path: str) -> None:
    """Write a dataset as an IDX image/label file pair (grayscale only);
    pixels are quantized to bytes, so the round trip is lossy below 1/255."""
    if dataset.images.shape[1] != 1:
        raise UsageError("save_idx handles single-channel images only")
    n, _, h, w = dataset.images.shape
    pixels = np.floor(dataset.images[:, 0] * 255.0 + 0.5).astype(np.uint8)
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", 0x803, n, h, w))
        f.write(pixels.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", 0x801, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_raw_f32_images(paths, shape) -> np.ndarray:
    """Read little-endian raw float32 image files (the attack export format)."""
    out = np.empty((len(paths),) + tuple(shape), dtype=np.float32)
    expect = int(np.prod(shape))
    for i, p in enumerate(paths):
        buf = np.fromfile(p, dtype="<f4")
        if buf.size != expect:
            raise FormatError(f"{p}: expected {expect} floats, got {buf.size}")
        out[i] = buf.reshape(shape)
    return out
