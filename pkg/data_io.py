#!/usr/bin/env python3
"""
MNIST / Fashion-MNIST ingestion from IDX files, splitting and batching.

IDX layout (big-endian): u32 magic, u32 count, [u32 rows, u32 cols,] raw
bytes. Pixels are scaled to [0, 1] by dividing by 255.
"""

import gzip
import logging
import os
import struct
from dataclasses import dataclass

import numpy as np

from errors import ConfigError, DataFormatError
from tensor_core import Tensor

logger = logging.getLogger(__name__)

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

DATA_DIR = os.getenv('DARCCC_DATA_DIR', os.path.join(os.getcwd(), 'data'))
DATASET_NAMES = ("mnist", "fashion")
DATASET_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
DEFAULT_VAL_FRACTION = 1.0 / 12.0


@dataclass(frozen=True)
class Dataset:
    """images: [n, 1, rows, cols] float64 in [0, 1]; labels: int64 in [0, num_classes)"""
    images: np.ndarray
    labels: np.ndarray
    name: str
    num_classes: int = 10

    def __post_init__(self):
        if self.images.shape[0] != self.labels.shape[0]:
            raise DataFormatError(self.name, f"{self.images.shape[0]} images but {self.labels.shape[0]} labels")
        if self.images.size and (self.images.min() < 0.0 or self.images.max() > 1.0):
            raise DataFormatError(self.name, "pixel values outside [0, 1]")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataFormatError(self.name, f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return int(self.labels.shape[0])

    def take(self, indices, name=None):
        indices = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[indices], self.labels[indices], name or self.name, self.num_classes)


@dataclass(frozen=True)
class Split:
    train: Dataset
    validation: Dataset
    test: Dataset = None
    seed: int = 0
    train_indices: np.ndarray = None
    validation_indices: np.ndarray = None


def _read_bytes(path):
    try:
        opener = gzip.open if str(path).endswith(".gz") else open
        with opener(path, "rb") as fh:
            return fh.read()
    except FileNotFoundError as exc:
        raise DataFormatError(path, "file not found") from exc
    except OSError as exc:
        raise DataFormatError(path, f"unreadable ({exc})") from exc


def _check_payload(path, data, header, expected):
    available = len(data) - header
    if available < expected:
        raise DataFormatError(path, f"truncated file: expected {expected} data bytes, found {available}")
    if available > expected:
        raise DataFormatError(path, f"count mismatch: {available - expected} bytes beyond the header count")


def read_idx_images(path):
    """Raw uint8 images [n, rows, cols]"""
    data = _read_bytes(path)
    if len(data) < 16:
        raise DataFormatError(path, "truncated file: incomplete header")
    magic, count, rows, cols = struct.unpack(">IIII", data[:16])
    if magic != IMAGE_MAGIC:
        raise DataFormatError(path, f"bad magic 0x{magic:08x}, expected 0x{IMAGE_MAGIC:08x}")
    _check_payload(path, data, 16, count * rows * cols)
    return np.frombuffer(data, dtype=np.uint8, offset=16).reshape(count, rows, cols)


def read_idx_labels(path):
    """Raw uint8 labels [n]"""
    data = _read_bytes(path)
    if len(data) < 8:
        raise DataFormatError(path, "truncated file: incomplete header")
    magic, count = struct.unpack(">II", data[:8])
    if magic != LABEL_MAGIC:
        raise DataFormatError(path, f"bad magic 0x{magic:08x}, expected 0x{LABEL_MAGIC:08x}")
    _check_payload(path, data, 8, count)
    return np.frombuffer(data, dtype=np.uint8, offset=8)


def load_idx(images_path, labels_path, name="idx", num_classes=10):
    """Load an image/label IDX pair into a Dataset"""
    raw_images = read_idx_images(images_path)
    raw_labels = read_idx_labels(labels_path)
    if raw_images.shape[0] != raw_labels.shape[0]:
        raise DataFormatError(labels_path, f"count mismatch: {raw_images.shape[0]} images, "
                                           f"{raw_labels.shape[0]} labels")
    images = raw_images.astype(np.float64)[:, None, :, :] / 255.0
    labels = raw_labels.astype(np.int64)
    logger.info("Loaded %s: %d images of %dx%d", name, images.shape[0], images.shape[2], images.shape[3])
    return Dataset(images=images, labels=labels, name=name, num_classes=num_classes)


def _resolve(directory, filename):
    for candidate in (filename, filename + ".gz"):
        path = os.path.join(directory, candidate)
        if os.path.exists(path):
            return path
    raise DataFormatError(os.path.join(directory, filename), "file not found (also tried .gz)")


def load_dataset(name, part="train", data_dir=None):
    """Load `<data_dir>/<name>/` standard IDX files for part 'train' or 'test'"""
    if name not in DATASET_NAMES:
        raise ConfigError(f"unknown dataset {name!r}; expected one of {DATASET_NAMES}")
    if part not in DATASET_FILES:
        raise ConfigError(f"unknown dataset part {part!r}")
    directory = os.path.join(data_dir or DATA_DIR, name)
    images_file, labels_file = DATASET_FILES[part]
    return load_idx(_resolve(directory, images_file), _resolve(directory, labels_file), name=f"{name}-{part}")


def split(dataset, val_fraction=DEFAULT_VAL_FRACTION, seed=0, test=None):
    """Deterministic shuffled train/validation partition of `dataset`"""
    if not 0.0 < val_fraction < 1.0:
        raise ConfigError(f"val_fraction must be in (0, 1), got {val_fraction}")
    n = len(dataset)
    n_val = int(round(n * val_fraction))
    if n_val < 1 or n_val >= n:
        raise ConfigError(f"val_fraction {val_fraction} leaves an empty subset of {n} examples")
    order = np.random.default_rng(seed).permutation(n)
    validation_indices = np.sort(order[:n_val])
    train_indices = np.sort(order[n_val:])
    return Split(
        train=dataset.take(train_indices, f"{dataset.name}/train"),
        validation=dataset.take(validation_indices, f"{dataset.name}/validation"),
        test=test,
        seed=seed,
        train_indices=train_indices,
        validation_indices=validation_indices,
    )


def subset(dataset, limit, seed=0):
    """Deterministic sample of at most `limit` examples, kept in original order"""
    if limit is None or limit >= len(dataset):
        return dataset
    if limit < 1:
        raise ConfigError(f"subset limit must be >= 1, got {limit}")
    chosen = np.sort(np.random.default_rng(seed).permutation(len(dataset))[:limit])
    return dataset.take(chosen)


def batches(dataset, batch_size, shuffle_seed=None):
    """Yield (images Tensor, labels array); every example exactly once per pass"""
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        index = order[start:start + batch_size]
        yield Tensor(dataset.images[index]), dataset.labels[index]
