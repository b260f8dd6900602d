"""Dataset ingestion: IDX image/label files (the MNIST format), a synthetic
Gaussian generator for fast tests, and deterministic shuffled batching.

Features are stored feature-major, (dim x count), matching the network
stack's activation layout.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class FormatError(ValueError):
    """Raised when an IDX file has an unexpected magic number or layout."""


class LengthError(ValueError):
    """Raised when an IDX file is shorter than its header declares."""


@dataclass
class Dataset:
    features: NDArray[np.float64]  # (dim, count)
    labels: NDArray[np.int64]  # (count,)
    num_classes: int

    def __post_init__(self) -> None:
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.ndim != 1:
            raise ValueError("features must be 2-d and labels 1-d")
        if self.features.shape[1] != self.labels.shape[0]:
            raise ValueError(
                f"{self.features.shape[1]} feature columns but "
                f"{self.labels.shape[0]} labels"
            )
        if self.labels.shape[0] < 1:
            raise ValueError("dataset must contain at least one example")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("features contain non-finite entries")
        if self.labels.min() < 0 or self.labels.max() >= self.num_classes:
            raise ValueError(f"labels must lie in [0, {self.num_classes})")

    @property
    def dim(self) -> int:
        return int(self.features.shape[0])

    @property
    def count(self) -> int:
        return int(self.features.shape[1])


def _read_bytes(path) -> bytes:
    """Read a file, transparently decompressing gzip content."""
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        with gzip.open(path, "rb") as fh:
            return fh.read()
    with open(path, "rb") as fh:
        return fh.read()


def _parse_header(raw: bytes, expected_magic: int, ndims: int, path) -> tuple:
    header_len = 4 * (1 + ndims)
    if len(raw) < header_len:
        raise LengthError(f"{path}: file too short for an IDX header")
    fields = struct.unpack(f">{1 + ndims}I", raw[:header_len])
    magic = fields[0]
    if magic != expected_magic:
        raise FormatError(
            f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}"
        )
    return fields[1:], raw[header_len:]


def load_idx(images_path, labels_path) -> Dataset:
    """Load an IDX image/label pair (plain or gzip-compressed).

    Pixels are scaled to [0, 1]; each image is flattened row-major into one
    feature column.
    """
    raw = _read_bytes(images_path)
    (count, rows, cols), body = _parse_header(raw, IMAGE_MAGIC, 3, images_path)
    expected = count * rows * cols
    if len(body) < expected:
        raise LengthError(
            f"{images_path}: expected {expected} pixel bytes, found {len(body)}"
        )
    pixels = np.frombuffer(body[:expected], dtype=np.uint8)
    features = np.ascontiguousarray(
        pixels.reshape(count, rows * cols).T.astype(np.float64) / 255.0
    )

    raw = _read_bytes(labels_path)
    (label_count,), body = _parse_header(raw, LABEL_MAGIC, 1, labels_path)
    if len(body) < label_count:
        raise LengthError(
            f"{labels_path}: expected {label_count} label bytes, found {len(body)}"
        )
    if label_count != count:
        raise FormatError(
            f"{labels_path}: {label_count} labels for {count} images"
        )
    labels = np.frombuffer(body[:label_count], dtype=np.uint8).astype(np.int64)
    return Dataset(features, labels, num_classes=int(labels.max()) + 1)


def synth_gaussians(classes: int, dim: int, per_class: int, seed: int) -> Dataset:
    """Unit-covariance Gaussian blobs with seeded random means (std 3)."""
    if classes < 2:
        raise ValueError("need at least 2 classes")
    if dim < 1:
        raise ValueError("dim must be >= 1")
    if per_class < 1:
        raise ValueError("per_class must be >= 1")
    rng = np.random.default_rng(seed)
    means = rng.normal(0.0, 3.0, size=(classes, dim))
    features = np.empty((dim, classes * per_class))
    labels = np.empty(classes * per_class, dtype=np.int64)
    for c in range(classes):
        block = slice(c * per_class, (c + 1) * per_class)
        features[:, block] = means[c][:, None] + rng.normal(size=(dim, per_class))
        labels[block] = c
    return Dataset(features, labels, num_classes=classes)


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int):
    """Yield (features, labels) minibatches in a seeded shuffled order.

    The permutation is a pure function of (seed, epoch); the final partial
    batch is included, so the batches partition the dataset exactly.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = np.random.default_rng([seed, epoch]).permutation(ds.count)
    for start in range(0, ds.count, batch_size):
        idx = perm[start : start + batch_size]
        yield np.ascontiguousarray(ds.features[:, idx]), ds.labels[idx]
