#!/usr/bin/env python3
"""
Error types shared by every module.

Each error knows the process exit code the CLI should use for it:
1 usage/config, 2 data (datasets and checkpoint files), 3 numeric failure.
"""


class DarcccError(RuntimeError):
    """Base class for all errors raised by this package"""
    exit_code = 1


class ConfigError(DarcccError):
    """Invalid configuration value or incompatible option combination"""
    exit_code = 1


class ShapeError(DarcccError):
    """Operands whose shapes do not conform for an operation"""
    exit_code = 1

    def __init__(self, op, *shapes, detail=None):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        rendered = " vs ".join(str(s) for s in self.shapes)
        message = f"{op}: shape mismatch {rendered}"
        if detail:
            message += f" ({detail})"
        super().__init__(message)


class GraphError(DarcccError):
    """Misuse of the autodiff graph (non-scalar loss, consumed graph)"""
    exit_code = 1


class DataFormatError(DarcccError):
    """Missing, truncated or malformed dataset file"""
    exit_code = 2

    def __init__(self, path, reason):
        self.path = str(path)
        self.reason = reason
        super().__init__(f"{self.path}: {reason}")


class CheckpointError(DarcccError):
    """Unreadable checkpoint or tensor-table file"""
    exit_code = 2


class CalibrationError(DarcccError):
    """Threshold calibration impossible (empty set, model without decoder)"""
    exit_code = 1


class NumericError(DarcccError):
    """Non-finite loss during training"""
    exit_code = 3

    def __init__(self, epoch, batch, value):
        self.epoch = epoch
        self.batch = batch
        self.value = value
        super().__init__(f"non-finite loss {value!r} at epoch {epoch}, batch {batch}")


class BoundsError(DarcccError):
    """Adversarial image outside [0, 1] or outside its perturbation ball"""
    exit_code = 3
