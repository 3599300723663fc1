#!/usr/bin/env python3
"""Shared fixtures: tiny model configs and IDX files written to tmp_path"""

import os
import struct

import numpy as np
import pytest

from data_io import IMAGE_MAGIC, LABEL_MAGIC
from models import ModelConfig

TINY_SIZE = 14

TINY_OPTIONS = {
    "capsule": dict(image_size=TINY_SIZE, conv1_channels=4, conv1_kernel=3, primary_capsules=2,
                    primary_dim=4, primary_kernel=3, primary_stride=2, pose_dim=4, decoder_widths=(8, 8)),
    "cnn_r": dict(image_size=TINY_SIZE, cnn_kernel=3, cnn_channels=(2, 3), pose_dim=4, decoder_widths=(8, 8)),
    "masked_cnn_r": dict(image_size=TINY_SIZE, cnn_kernel=3, cnn_channels=(2, 3), pose_dim=4,
                         decoder_widths=(8, 8)),
    "attacker_cnn": dict(image_size=TINY_SIZE, attacker_kernel=3, attacker_channels=(2, 3),
                         attacker_hidden=(8, 6)),
}


def write_idx_images(path, images):
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack(">IIII", IMAGE_MAGIC, n, rows, cols))
        fh.write(images.tobytes())


def write_idx_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack(">II", LABEL_MAGIC, labels.shape[0]))
        fh.write(labels.tobytes())


def synthetic_digits(n, seed, size=TINY_SIZE):
    """Each class lights a different horizontal band, plus noise"""
    rng = np.random.default_rng(seed)
    labels = np.arange(n) % 10
    images = rng.integers(0, 40, size=(n, size, size))
    for i, label in enumerate(labels):
        row = label % (size - 2)
        images[i, row:row + 3, :] = 200 + label * 5
    return images.astype(np.uint8), labels.astype(np.uint8)


@pytest.fixture
def tiny_config():
    def make(architecture="capsule", **overrides):
        options = dict(TINY_OPTIONS[architecture])
        options.update(overrides)
        return ModelConfig(architecture=architecture, **options)
    return make


@pytest.fixture
def tiny_model_options():
    """--model-option flags for the tiny configs"""
    def make(architecture):
        flags = []
        for key, value in TINY_OPTIONS[architecture].items():
            text = ",".join(str(v) for v in value) if isinstance(value, tuple) else str(value)
            flags += ["--model-option", f"{key}={text}"]
        return flags
    return make


@pytest.fixture
def data_dir(tmp_path):
    """A tiny 'mnist' dataset: 48 training and 20 test images of 14x14"""
    root = tmp_path / "data"
    directory = root / "mnist"
    os.makedirs(directory)
    train_images, train_labels = synthetic_digits(48, seed=1)
    test_images, test_labels = synthetic_digits(20, seed=2)
    write_idx_images(directory / "train-images-idx3-ubyte", train_images)
    write_idx_labels(directory / "train-labels-idx1-ubyte", train_labels)
    write_idx_images(directory / "t10k-images-idx3-ubyte", test_images)
    write_idx_labels(directory / "t10k-labels-idx1-ubyte", test_labels)
    return root


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
