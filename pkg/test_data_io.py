#!/usr/bin/env python3
"""IDX parsing, splits, subsets and batching"""

import gzip
import struct

import numpy as np
import pytest

from conftest import write_idx_images, write_idx_labels
from data_io import batches, load_dataset, load_idx, read_idx_labels, split, subset, Dataset
from errors import ConfigError, DataFormatError


def make_dataset(n, size=4):
    images = np.linspace(0.0, 1.0, n * size * size).reshape(n, 1, size, size)
    return Dataset(images=images, labels=np.arange(n) % 10, name="toy")


def test_two_image_fixture_loads_exact_values(tmp_path):
    raw = np.array([[[0, 255], [51, 102]], [[255, 0], [0, 255]]], dtype=np.uint8)
    write_idx_images(tmp_path / "images", raw)
    write_idx_labels(tmp_path / "labels", [7, 2])
    dataset = load_idx(tmp_path / "images", tmp_path / "labels")
    assert dataset.images.shape == (2, 1, 2, 2)
    assert np.allclose(dataset.images[0, 0], [[0.0, 1.0], [0.2, 0.4]])
    assert dataset.labels.tolist() == [7, 2]


def test_gzip_files_are_read_transparently(tmp_path):
    with gzip.open(tmp_path / "labels.gz", "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 3) + bytes([1, 2, 3]))
    assert read_idx_labels(tmp_path / "labels.gz").tolist() == [1, 2, 3]


def test_label_file_with_image_magic_is_rejected(tmp_path):
    with open(tmp_path / "labels", "wb") as fh:
        fh.write(struct.pack(">II", 0x00000803, 1) + bytes([1]))
    with pytest.raises(DataFormatError, match="bad magic"):
        read_idx_labels(tmp_path / "labels")


def test_truncated_and_oversized_files_are_rejected(tmp_path):
    with open(tmp_path / "short", "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 5) + bytes([1, 2]))
    with pytest.raises(DataFormatError, match="truncated"):
        read_idx_labels(tmp_path / "short")

    with open(tmp_path / "long", "wb") as fh:
        fh.write(struct.pack(">II", 0x00000801, 1) + bytes([1, 2]))
    with pytest.raises(DataFormatError, match="count mismatch"):
        read_idx_labels(tmp_path / "long")


def test_image_and_label_counts_must_agree(tmp_path):
    write_idx_images(tmp_path / "images", np.zeros((2, 3, 3)))
    write_idx_labels(tmp_path / "labels", [1, 2, 3])
    with pytest.raises(DataFormatError, match="count mismatch"):
        load_idx(tmp_path / "images", tmp_path / "labels")


def test_load_dataset_uses_standard_names(data_dir):
    train = load_dataset("mnist", "train", data_dir)
    test = load_dataset("mnist", "test", data_dir)
    assert len(train) == 48 and len(test) == 20
    assert train.images.shape[1:] == (1, 14, 14)


def test_missing_dataset_is_a_data_error(tmp_path):
    with pytest.raises(DataFormatError) as info:
        load_dataset("fashion", "train", tmp_path)
    assert info.value.exit_code == 2
    with pytest.raises(ConfigError):
        load_dataset("svhn", "train", tmp_path)


def test_split_sizes_and_determinism():
    dataset = make_dataset(120)
    first = split(dataset, 1.0 / 12.0, seed=7)
    again = split(dataset, 1.0 / 12.0, seed=7)
    assert len(first.train) == 110 and len(first.validation) == 10
    assert np.array_equal(first.validation_indices, again.validation_indices)
    assert set(first.train_indices).isdisjoint(first.validation_indices)
    assert len(set(first.train_indices) | set(first.validation_indices)) == 120


def test_split_rejects_empty_subsets():
    with pytest.raises(ConfigError):
        split(make_dataset(12), 0.0)
    with pytest.raises(ConfigError):
        split(make_dataset(3), 0.01)


def test_batches_cover_every_example_once():
    dataset = make_dataset(10)
    sizes = [len(labels) for _, labels in batches(dataset, 4)]
    assert sizes == [4, 4, 2]

    ordered = np.concatenate([labels for _, labels in batches(dataset, 4)])
    assert np.array_equal(ordered, dataset.labels)

    shuffled = np.concatenate([x.data[:, 0, 0, 0] for x, _ in batches(dataset, 3, shuffle_seed=5)])
    assert np.array_equal(np.sort(shuffled), np.sort(dataset.images[:, 0, 0, 0]))


def test_subset_is_deterministic_and_ordered():
    dataset = make_dataset(50)
    a = subset(dataset, 20, seed=3)
    b = subset(dataset, 20, seed=3)
    assert len(a) == 20
    assert np.array_equal(a.images, b.images)
    assert subset(dataset, None) is dataset
