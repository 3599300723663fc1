#!/usr/bin/env python3
"""
Checkpoint / tensor-table persistence.

File layout (integers are little-endian u32):

    b"DRCC" | version | tag length | tag (utf-8)
    | config length | config text (key=value lines, utf-8)
    | tensor count | per tensor: name length | name | rank | dims... | float32 LE data

The same container carries trained models (tag = architecture) and
adversarial batches (tag = "adversarial_batch").
"""

import logging
import os
import struct
from collections import OrderedDict
from dataclasses import dataclass, field, fields

import numpy as np

from errors import CheckpointError

logger = logging.getLogger(__name__)

MAGIC = b"DRCC"
FORMAT_VERSION = 1
KNOWN_TAGS = ("capsule", "cnn_r", "masked_cnn_r", "attacker_cnn", "adversarial_batch")


@dataclass
class Checkpoint:
    """Named float32 tensors plus a tag and a key=value config block"""
    architecture: str
    config: "OrderedDict[str, str]" = field(default_factory=OrderedDict)
    tensors: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    version: int = FORMAT_VERSION


def _format_value(value):
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text, default):
    if isinstance(default, bool):
        return text.strip().lower() == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(part) for part in text.split(",") if part.strip())
    if default is None:
        if text.strip().lower() == "none":
            return None
        try:
            return int(text)
        except ValueError:
            return float(text)
    return text


def config_entries(obj, prefix=""):
    """Flatten a config dataclass into ordered key=value strings"""
    return OrderedDict((f"{prefix}{f.name}", _format_value(getattr(obj, f.name))) for f in fields(obj))


def config_from_entries(cls, entries, prefix=""):
    """Rebuild a config dataclass; keys absent from `entries` keep their defaults"""
    defaults = cls()
    kwargs = {}
    for f in fields(cls):
        key = f"{prefix}{f.name}"
        if key in entries:
            try:
                kwargs[f.name] = _parse_value(entries[key], getattr(defaults, f.name))
            except ValueError as exc:
                raise CheckpointError(f"bad config value {key}={entries[key]!r}") from exc
    return cls(**kwargs)


def _pack_string(text):
    raw = text.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def save_checkpoint(path, checkpoint):
    """Write a checkpoint; tensors are stored as float32"""
    if checkpoint.architecture not in KNOWN_TAGS:
        raise CheckpointError(f"unknown architecture tag {checkpoint.architecture!r}")
    lines = []
    for key, value in checkpoint.config.items():
        if "=" in key or "\n" in key or "\n" in str(value):
            raise CheckpointError(f"config entry not representable: {key!r}")
        lines.append(f"{key}={value}")

    chunks = [MAGIC, struct.pack("<I", checkpoint.version),
              _pack_string(checkpoint.architecture), _pack_string("\n".join(lines)),
              struct.pack("<I", len(checkpoint.tensors))]
    for name, array in checkpoint.tensors.items():
        data = np.ascontiguousarray(array, dtype="<f4")
        chunks.append(_pack_string(name))
        chunks.append(struct.pack("<I", data.ndim))
        chunks.append(struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(data.tobytes())

    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))
    logger.info("Saved %s checkpoint with %d tensors to %s",
                checkpoint.architecture, len(checkpoint.tensors), path)


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.path = path
        self.offset = 0

    def take(self, count):
        if self.offset + count > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        chunk = self.data[self.offset:self.offset + count]
        self.offset += count
        return chunk

    def u32(self):
        return struct.unpack("<I", self.take(4))[0]

    def string(self):
        try:
            return self.take(self.u32()).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"{self.path}: corrupt string") from exc


def load_checkpoint(path):
    """Read a checkpoint written by `save_checkpoint`"""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CheckpointError(f"{path}: cannot read checkpoint ({exc})") from exc

    reader = _Reader(data, path)
    if reader.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    version = reader.u32()
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    architecture = reader.string()
    if architecture not in KNOWN_TAGS:
        raise CheckpointError(f"{path}: unknown architecture tag {architecture!r}")

    config = OrderedDict()
    for line in reader.string().splitlines():
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise CheckpointError(f"{path}: malformed config line {line!r}")
        config[key] = value

    tensors = OrderedDict()
    for _ in range(reader.u32()):
        name = reader.string()
        rank = reader.u32()
        shape = tuple(reader.u32() for _ in range(rank))
        count = int(np.prod(shape)) if shape else 1
        raw = reader.take(4 * count)
        tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).copy()
    if reader.offset != len(data):
        raise CheckpointError(f"{path}: trailing bytes after tensor table")
    return Checkpoint(architecture=architecture, config=config, tensors=tensors, version=version)
