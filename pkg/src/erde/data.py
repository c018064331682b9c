"""Dataset ingestion: CIFAR-style binary, IDX, and a synthetic benchmark.

Images are N x C x H x W, scaled to [0, 1] at load time; per-channel
standardization statistics are computed on the training split only and then
applied to every split.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class DataFormatError(ValueError):
    """Malformed dataset file; no partial dataset is returned."""


@dataclass
class Dataset:
    images: np.ndarray          # (N, C, H, W)
    labels: np.ndarray          # (N,) integers in [0, K)
    class_count: int
    provenance: str
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.images.ndim != 4:
            raise DataFormatError(f"images must be (N, C, H, W), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise DataFormatError(
                f"labels shape {self.labels.shape} inconsistent with N={self.images.shape[0]}")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataFormatError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.images.shape[0]

    def subset(self, indices):
        return Dataset(self.images[indices], self.labels[indices],
                       self.class_count, self.provenance, dict(self.meta))


@dataclass(frozen=True)
class SplitSpec:
    train: int
    val: int
    test: int
    seed: int = 0


@dataclass
class Splits:
    train: Dataset
    val: Dataset
    test: Dataset


# ---------------------------------------------------------------------------
# loaders

CIFAR_RECORD = 3073  # 1 label byte + 3 * 32 * 32 pixel bytes


def load_cifar_binary(paths, class_count=10):
    """Read CIFAR-style binary batches: per record one label byte then three
    32x32 channel planes, row-major."""
    if isinstance(paths, (str, bytes)):
        paths = [paths]
    images, labels = [], []
    for path in paths:
        with open(path, "rb") as f:
            raw = f.read()
        if len(raw) == 0 or len(raw) % CIFAR_RECORD != 0:
            raise DataFormatError(
                f"{path}: size {len(raw)} is not a whole number of {CIFAR_RECORD}-byte records")
        records = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
        batch_labels = records[:, 0].astype(np.int64)
        if batch_labels.max(initial=0) >= class_count:
            raise DataFormatError(
                f"{path}: label byte {batch_labels.max()} >= class count {class_count}")
        images.append(records[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0)
        labels.append(batch_labels)
    return Dataset(np.concatenate(images), np.concatenate(labels), class_count,
                   provenance=f"cifar-binary({','.join(str(p) for p in paths)})")


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def load_idx(image_path, label_path):
    """Read an IDX image/label pair into a grayscale N x 1 x H x W dataset."""
    with open(image_path, "rb") as f:
        header = f.read(16)
        if len(header) != 16:
            raise DataFormatError(f"{image_path}: truncated IDX header")
        magic, n, h, w = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise DataFormatError(
                f"{image_path}: bad magic 0x{magic:08x}, expected 0x{IDX_IMAGE_MAGIC:08x}")
        payload = f.read(n * h * w)
        if len(payload) != n * h * w:
            raise DataFormatError(f"{image_path}: truncated pixel payload")
        images = np.frombuffer(payload, dtype=np.uint8).reshape(n, 1, h, w)
    with open(label_path, "rb") as f:
        header = f.read(8)
        if len(header) != 8:
            raise DataFormatError(f"{label_path}: truncated IDX header")
        magic, n_labels = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise DataFormatError(
                f"{label_path}: bad magic 0x{magic:08x}, expected 0x{IDX_LABEL_MAGIC:08x}")
        if n_labels != n:
            raise DataFormatError(
                f"label count {n_labels} != image count {n}")
        raw = f.read(n_labels)
        if len(raw) != n_labels:
            raise DataFormatError(f"{label_path}: truncated label payload")
        labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)
    class_count = int(labels.max()) + 1 if len(labels) else 1
    return Dataset(images.astype(np.float32) / 255.0, labels, max(class_count, 2),
                   provenance=f"idx({image_path},{label_path})")


# ---------------------------------------------------------------------------
# synthetic benchmark


def class_templates(class_count, height, width, channels=3):
    """Deterministic per-class patterns: sinusoidal gratings at a distinct
    frequency and orientation per class, with a per-channel phase shift.

    Class identity is carried mainly by frequency, so label-preserving
    geometric augmentation (flips, small rotations, translations, crops)
    leaves the class recoverable.
    """
    yy, xx = np.meshgrid(np.linspace(0.0, 1.0, height, endpoint=False),
                         np.linspace(0.0, 1.0, width, endpoint=False), indexing="ij")
    templates = np.empty((class_count, channels, height, width), dtype=np.float64)
    for k in range(class_count):
        angle = np.deg2rad(5.0 * k)
        freq = 1.5 + 1.0 * k
        axis = np.cos(angle) * xx + np.sin(angle) * yy
        for c in range(channels):
            phase = 2.0 * np.pi * c / 3.0
            templates[k, c] = 0.5 + 0.35 * np.sin(2.0 * np.pi * freq * axis + phase)
    return templates


def synth_generate(class_count, n, height, width, noise_sigma, seed, dtype=np.float32):
    """Balanced synthetic dataset: class template plus Gaussian pixel noise."""
    if class_count > 8:
        raise ValueError("synthetic generator supports at most 8 classes")
    if height < 8 or width < 8:
        raise ValueError("synthetic images must be at least 8x8")
    rng = np.random.default_rng(seed)
    templates = class_templates(class_count, height, width)
    labels = rng.permutation(np.arange(n) % class_count).astype(np.int64)
    images = templates[labels]
    if noise_sigma > 0:
        images = images + noise_sigma * rng.standard_normal(images.shape)
    provenance = (f"synth(k={class_count},n={n},hw={height}x{width},"
                  f"sigma={noise_sigma},seed={seed})")
    return Dataset(images.astype(dtype), labels, class_count, provenance,
                   meta={"templates": templates})


def nearest_template_predict(images, templates):
    """Classify by smallest squared distance to a class template."""
    flat = images.reshape(images.shape[0], -1).astype(np.float64)
    tmpl = templates.reshape(templates.shape[0], -1)
    d2 = ((flat[:, None, :] - tmpl[None, :, :]) ** 2).sum(axis=2)
    return d2.argmin(axis=1)


# ---------------------------------------------------------------------------
# splitting and standardization


def split_dataset(dataset, spec):
    """Disjoint seeded train/val/test split covering the requested sizes."""
    total = spec.train + spec.val + spec.test
    if total > len(dataset):
        raise ValueError(f"split sizes {total} exceed dataset size {len(dataset)}")
    if min(spec.train, spec.val, spec.test) < 0:
        raise ValueError("split sizes must be nonnegative")
    order = np.random.default_rng(spec.seed).permutation(len(dataset))
    train_idx = order[:spec.train]
    val_idx = order[spec.train:spec.train + spec.val]
    test_idx = order[spec.train + spec.val:total]
    return Splits(dataset.subset(train_idx), dataset.subset(val_idx),
                  dataset.subset(test_idx))


def standardize_splits(splits):
    """Standardize all splits with per-channel statistics of the train split."""
    train_images = splits.train.images.astype(np.float64)
    mean = train_images.mean(axis=(0, 2, 3))
    std = train_images.std(axis=(0, 2, 3))
    std = np.where(std == 0, 1.0, std)
    for ds in (splits.train, splits.val, splits.test):
        ds.images = ((ds.images - mean[None, :, None, None])
                     / std[None, :, None, None]).astype(ds.images.dtype)
        ds.meta["channel_mean"] = mean
        ds.meta["channel_std"] = std
    return splits
