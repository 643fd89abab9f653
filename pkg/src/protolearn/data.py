"""Dataset ingestion, synthesis, subsampling, and batching.

IDX files follow the classic MNIST layout: a big-endian header (magic,
then dimension sizes as 32-bit unsigned ints) followed by raw unsigned
bytes. Image files use magic 0x00000803, label files 0x00000801.

All randomness in this module comes from numpy's PCG64 generator
(``np.random.default_rng``); every operation that draws random numbers
takes an explicit seed and is bit-reproducible for a fixed seed.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, ParameterError

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


@dataclass
class Dataset:
    """Labeled image collection. ``pixels`` is (n, channels, height, width)
    float64; ``labels`` is (n,) int64, or None for unlabeled outlier sets."""

    pixels: np.ndarray
    labels: np.ndarray | None
    num_classes: int

    def __post_init__(self):
        if self.pixels.ndim != 4:
            raise ParameterError(
                f"pixels must be 4-d (n, c, h, w), got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ParameterError("pixels contain non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if len(self.labels) != len(self.pixels):
                raise ParameterError(
                    f"{len(self.labels)} labels for {len(self.pixels)} images")
            if len(self.labels) and (self.labels.min() < 0
                                     or self.labels.max() >= self.num_classes):
                raise ParameterError(
                    f"labels must lie in [0, {self.num_classes})")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.pixels.shape[1:]

    def __len__(self) -> int:
        return len(self.pixels)


@dataclass
class Batch:
    pixels: np.ndarray   # (b, c, h, w)
    labels: np.ndarray   # (b,)

    def __len__(self) -> int:
        return len(self.pixels)


def _read_exact(fh, n: int, path, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise FormatError(
            f"{path}: truncated file, expected {n} more bytes for {what}, "
            f"got {len(data)}")
    return data


def load_idx_images(path) -> np.ndarray:
    """Read an IDX image file; returns (count, rows, cols) uint8."""
    with open(path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, path, "magic"))
        if magic != IMAGE_MAGIC:
            raise FormatError(
                f"{path}: bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x} "
                "for an IDX image file")
        count, rows, cols = struct.unpack(
            ">III", _read_exact(fh, 12, path, "header"))
        payload = _read_exact(fh, count * rows * cols, path, "pixel payload")
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path) -> np.ndarray:
    """Read an IDX label file; returns (count,) uint8."""
    with open(path, "rb") as fh:
        magic, = struct.unpack(">I", _read_exact(fh, 4, path, "magic"))
        if magic != LABEL_MAGIC:
            raise FormatError(
                f"{path}: bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x} "
                "for an IDX label file")
        count, = struct.unpack(">I", _read_exact(fh, 4, path, "count"))
        payload = _read_exact(fh, count, path, "label payload")
    return np.frombuffer(payload, dtype=np.uint8)


def _write_atomic(path, blob: bytes) -> None:
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def save_idx_images(images: np.ndarray, path) -> None:
    """Write (count, rows, cols) uint8 images in IDX format (bit-exact)."""
    images = np.ascontiguousarray(images, dtype=np.uint8)
    if images.ndim != 3:
        raise ParameterError(f"images must be 3-d, got shape {images.shape}")
    _write_atomic(path, struct.pack(">IIII", IMAGE_MAGIC, *images.shape)
                  + images.tobytes())


def save_idx_labels(labels: np.ndarray, path) -> None:
    labels = np.ascontiguousarray(labels, dtype=np.uint8)
    if labels.ndim != 1:
        raise ParameterError(f"labels must be 1-d, got shape {labels.shape}")
    _write_atomic(path, struct.pack(">II", LABEL_MAGIC, len(labels))
                  + labels.tobytes())


def normalize(raw: np.ndarray) -> np.ndarray:
    """Map byte images (n, rows, cols) to float64 (n, 1, rows, cols) in [0,1]."""
    out = np.asarray(raw, dtype=np.float64) / 255.0
    return out[:, None, :, :]


def dataset_from_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Load a paired IDX image/label file into a normalized Dataset.

    The two files must agree on sample count; num_classes defaults to
    max(label) + 1.
    """
    images = load_idx_images(images_path)
    labels = load_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(
            f"pairing error: {images_path} has {len(images)} images but "
            f"{labels_path} has {len(labels)} labels")
    if num_classes is None:
        num_classes = int(labels.max()) + 1 if len(labels) else 0
    return Dataset(normalize(images), labels.astype(np.int64), num_classes)


def outliers_from_idx(images_path) -> Dataset:
    """Load an unlabeled IDX image file as a normalized outlier set."""
    return Dataset(normalize(load_idx_images(images_path)), None, 0)


def quantize_to_bytes(pixels: np.ndarray) -> np.ndarray:
    """Clip float pixels to [0,1] and quantize to uint8 for IDX export."""
    return np.clip(np.round(pixels * 255.0), 0, 255).astype(np.uint8)


def make_gaussian_blobs(num_classes: int, per_class: int, shape, centers,
                        sigma: float, seed: int = 0) -> Dataset:
    """Synthetic image dataset: per-class isotropic Gaussians around the
    given flat centers, reshaped to ``shape`` = (c, h, w)."""
    if sigma <= 0:
        raise ParameterError(f"sigma must be positive, got {sigma}")
    if num_classes < 1 or per_class < 1:
        raise ParameterError("num_classes and per_class must be >= 1")
    centers = np.asarray(centers, dtype=np.float64)
    c, h, w = shape
    dim = c * h * w
    if centers.shape != (num_classes, dim):
        raise ParameterError(
            f"need {num_classes} centers of dim {dim}, got shape {centers.shape}")
    rng = np.random.default_rng(seed)
    n = num_classes * per_class
    flat = rng.standard_normal((n, dim)) * sigma
    labels = np.repeat(np.arange(num_classes), per_class)
    flat += centers[labels]
    return Dataset(flat.reshape(n, c, h, w), labels, num_classes)


def make_uniform_noise(count: int, shape, seed: int = 0) -> Dataset:
    """Unlabeled images with pixels i.i.d. uniform on [0,1]."""
    if count < 1:
        raise ParameterError(f"count must be >= 1, got {count}")
    c, h, w = shape
    rng = np.random.default_rng(seed)
    return Dataset(rng.uniform(0.0, 1.0, size=(count, c, h, w)), None, 0)


def subsample(dataset: Dataset, fraction: float, seed: int = 0,
              stratified: bool = True) -> Dataset:
    """Seeded random subset keeping round(fraction * count) samples.

    Stratified mode (requires labels) rounds per class, keeping at least
    one sample of every class; class proportions are preserved to +-1.
    """
    if not 0.0 < fraction <= 1.0:
        raise ParameterError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    if stratified:
        if dataset.labels is None:
            raise ParameterError("stratified subsampling requires labels")
        keep = []
        for cls in range(dataset.num_classes):
            idx = np.flatnonzero(dataset.labels == cls)
            # half-up rounding, never dropping a class entirely
            take = max(1, int(np.floor(fraction * len(idx) + 0.5)))
            keep.append(rng.permutation(idx)[:take])
        keep = np.concatenate(keep)
        rng.shuffle(keep)
    else:
        take = int(np.floor(fraction * len(dataset) + 0.5))
        if take < 1:
            raise ParameterError(
                f"fraction {fraction} of {len(dataset)} samples rounds to zero")
        keep = rng.permutation(len(dataset))[:take]
    labels = dataset.labels[keep] if dataset.labels is not None else None
    return Dataset(dataset.pixels[keep], labels, dataset.num_classes)


def batches(dataset: Dataset, batch_size: int, seed: int = 0,
            shuffle: bool = True, epoch: int = 0):
    """Yield Batch objects covering the dataset exactly once.

    The last batch may be short. Shuffle order is a pure function of
    (seed, epoch); shuffle=False preserves dataset order.
    """
    if batch_size < 1:
        raise ParameterError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    if shuffle:
        order = np.random.default_rng([seed, epoch]).permutation(n)
    else:
        order = np.arange(n)
    labels = dataset.labels
    if labels is None:
        labels = np.zeros(n, dtype=np.int64)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield Batch(dataset.pixels[idx], labels[idx])
