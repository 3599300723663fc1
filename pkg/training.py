#!/usr/bin/env python3
"""
Losses, Adam, the training loop and model <-> checkpoint conversion.

CapsNet trains on margin loss, the CNN models on softmax cross-entropy; every
decoder model adds eta * reconstruction loss computed from the true class.
"""

import csv
import logging
import math
import os
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from tqdm import tqdm

import tensor_core as tc
from checkpoint import Checkpoint, config_entries, config_from_entries
from data_io import batches, subset
from errors import CheckpointError, ConfigError, NumericError, ShapeError
from models import ModelConfig, build_model
from tensor_core import Tensor, no_grad

logger = logging.getLogger(__name__)

# 0.0005 per pixel over a 28x28 image
DEFAULT_RECONSTRUCTION_WEIGHT = 0.0005 * 784


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 128
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    reconstruction_weight: float = DEFAULT_RECONSTRUCTION_WEIGHT
    m_plus: float = 0.9
    m_minus: float = 0.1
    margin_lambda: float = 0.5
    seed: int = 0
    train_limit: Optional[int] = None

    def validate(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be >= 1")
        if self.learning_rate <= 0 or self.adam_epsilon <= 0 or self.margin_lambda <= 0:
            raise ConfigError("learning_rate, adam_epsilon and margin_lambda must be positive")
        if not (0.0 < self.beta1 < 1.0 and 0.0 < self.beta2 < 1.0):
            raise ConfigError("Adam betas must lie in (0, 1)")
        if not 0.0 < self.m_minus < self.m_plus <= 1.0:
            raise ConfigError(f"need 0 < m_minus < m_plus <= 1, got {self.m_minus}, {self.m_plus}")
        if self.reconstruction_weight < 0:
            raise ConfigError("reconstruction_weight must be >= 0")
        if self.train_limit is not None and self.train_limit < 1:
            raise ConfigError("train_limit must be >= 1")

    def to_config(self, prefix="train."):
        return config_entries(self, prefix)

    @classmethod
    def from_config(cls, entries, prefix="train."):
        return config_from_entries(cls, entries, prefix)


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

def margin_loss(class_scores, labels, m_plus=0.9, m_minus=0.1, lam=0.5):
    """
    L_k = T_k max(0, m+ - |v_k|)^2 + lam (1 - T_k) max(0, |v_k| - m-)^2,
    summed over classes and averaged over the batch.
    """
    present = tc.one_hot(labels, class_scores.shape[1])
    absent = Tensor(lam * (1.0 - present.data))
    upper = tc.square(tc.maximum(tc.sub(m_plus, class_scores), 0.0))
    lower = tc.square(tc.maximum(tc.sub(class_scores, m_minus), 0.0))
    per_class = tc.add(tc.mul(present, upper), tc.mul(absent, lower))
    return tc.reduce_mean(tc.reduce_sum(per_class, axis=1))


def cross_entropy(class_scores, labels, reduction="mean"):
    """Softmax cross-entropy over class scores"""
    picked = tc.mul(tc.one_hot(labels, class_scores.shape[1]), tc.log_softmax(class_scores, axis=1))
    total = tc.neg(tc.reduce_sum(picked))
    if reduction == "sum":
        return total
    return tc.mul(total, 1.0 / class_scores.shape[0])


def reconstruction_loss(x, reconstruction):
    """Mean over the batch of the summed squared pixel error"""
    x = tc.as_tensor(x)
    if x.ndim > 2:
        x = tc.reshape(x, (x.shape[0], -1))
    if x.shape != reconstruction.shape:
        raise ShapeError("reconstruction_loss", x.shape, reconstruction.shape)
    return tc.reduce_mean(tc.reduce_sum(tc.square(tc.sub(x, reconstruction)), axis=1))


def classification_loss(model, block, labels, config):
    if model.architecture == "capsule":
        return margin_loss(block.class_scores, labels, config.m_plus, config.m_minus, config.margin_lambda)
    return cross_entropy(block.class_scores, labels)


def total_loss(model, x, labels, config):
    """classification + eta * reconstruction (from the true class); returns (loss, block)"""
    block = model.forward(x)
    loss = classification_loss(model, block, labels, config)
    if model.has_decoder and config.reconstruction_weight > 0:
        recon = model.reconstruct(block, labels)
        loss = tc.add(loss, tc.mul(reconstruction_loss(x, recon), config.reconstruction_weight))
    return loss, block


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state, config):
    """One bias-corrected Adam update of `params` (name -> Tensor) in place"""
    state.step += 1
    b1, b2 = config.beta1, config.beta2
    correction1 = 1.0 - b1 ** state.step
    correction2 = 1.0 - b2 ** state.step
    for name, param in params.items():
        grad = grads.get(name)
        if grad is None:
            continue
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(param.data)
            v = np.zeros_like(param.data)
        m = b1 * m + (1.0 - b1) * grad
        v = b2 * v + (1.0 - b2) * grad * grad
        state.m[name], state.v[name] = m, v
        param.data = param.data - config.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + config.adam_epsilon)
    return state


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class EvalResult:
    loss: float
    accuracy: float


@dataclass
class TrainResult:
    model: object
    history: list
    best_epoch: int
    best_val_accuracy: float


def evaluate(model, dataset, config, batch_size=None):
    """Mean total loss and accuracy over a dataset, no graph recorded"""
    total, correct = 0.0, 0
    with no_grad():
        for x, labels in batches(dataset, batch_size or config.batch_size):
            loss, block = total_loss(model, x, labels, config)
            total += loss.item() * len(labels)
            correct += int((np.argmax(block.class_scores.data, axis=1) == labels).sum())
    n = max(len(dataset), 1)
    return EvalResult(loss=total / n, accuracy=correct / n)


def write_metrics_csv(history, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.train_acc),
                             repr(row.val_loss), repr(row.val_acc)])


def round_to_float32(arrays):
    return OrderedDict((name, a.astype(np.float32).astype(np.float64)) for name, a in arrays.items())


def train(model, data_split, config, metrics_path=None, progress=True):
    """
    Train with Adam and keep the weights of the best validation-accuracy
    epoch. The kept weights are rounded to float32, the checkpoint precision.
    """
    config.validate()
    train_set = subset(data_split.train, config.train_limit, seed=config.seed)
    state = AdamState()
    history = []
    best_arrays, best_epoch, best_accuracy = None, 0, -1.0
    steps_per_epoch = math.ceil(len(train_set) / config.batch_size)
    print(f"[Train] {model.architecture}: {model.parameter_count()} parameters, "
          f"{len(train_set)} training / {len(data_split.validation)} validation examples")

    for epoch in range(1, config.epochs + 1):
        running_loss, correct, seen = 0.0, 0, 0
        bar = tqdm(batches(train_set, config.batch_size, shuffle_seed=config.seed + epoch),
                   total=steps_per_epoch, desc=f"Epoch {epoch}/{config.epochs}",
                   disable=not progress, leave=False)
        for batch_index, (x, labels) in enumerate(bar):
            model.zero_grad()
            loss, block = total_loss(model, x, labels, config)
            value = loss.item()
            if not math.isfinite(value):
                logger.error("Non-finite loss at epoch %d batch %d", epoch, batch_index)
                raise NumericError(epoch, batch_index, value)
            loss.backward()
            adam_step(model.params, {name: p.grad for name, p in model.params.items()}, state, config)

            running_loss += value * len(labels)
            correct += int((np.argmax(block.class_scores.data, axis=1) == labels).sum())
            seen += len(labels)
            bar.set_postfix(loss=f"{running_loss / seen:.4f}", acc=f"{correct / seen:.4f}")

        validation = evaluate(model, data_split.validation, config)
        metrics = EpochMetrics(epoch, running_loss / seen, correct / seen, validation.loss, validation.accuracy)
        history.append(metrics)
        print(f"[Train] epoch {epoch}: train_loss={metrics.train_loss:.4f} train_acc={metrics.train_acc:.4f} "
              f"val_loss={metrics.val_loss:.4f} val_acc={metrics.val_acc:.4f}")
        logger.info("epoch %d train_loss=%.6f val_acc=%.6f", epoch, metrics.train_loss, metrics.val_acc)
        if validation.accuracy > best_accuracy:
            best_arrays, best_epoch, best_accuracy = model.arrays(), epoch, validation.accuracy
        if metrics_path:
            write_metrics_csv(history, metrics_path)

    model.load_arrays(round_to_float32(best_arrays))
    model.zero_grad()
    print(f"[Train] best epoch {best_epoch} (val_acc={best_accuracy:.4f})")
    return TrainResult(model=model, history=history, best_epoch=best_epoch, best_val_accuracy=best_accuracy)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def model_to_checkpoint(model, train_config=None, extra=None):
    entries = OrderedDict(model.config.to_config())
    if train_config is not None:
        entries.update(train_config.to_config())
    if extra:
        entries.update((key, str(value)) for key, value in extra.items())
    tensors = OrderedDict((name, p.data.astype(np.float32)) for name, p in model.params.items())
    return Checkpoint(architecture=model.architecture, config=entries, tensors=tensors)


def model_from_checkpoint(checkpoint):
    if checkpoint.architecture == "adversarial_batch":
        raise CheckpointError("file holds an adversarial batch, not a model")
    config = ModelConfig.from_config(checkpoint.config)
    if config.architecture != checkpoint.architecture:
        raise CheckpointError(f"architecture tag {checkpoint.architecture!r} disagrees with "
                              f"config {config.architecture!r}")
    arrays = OrderedDict((name, a.astype(np.float64)) for name, a in checkpoint.tensors.items())
    try:
        return build_model(config, params=arrays)
    except ShapeError as exc:
        raise CheckpointError(f"checkpoint does not match its architecture: {exc}") from exc


def metrics_path_for(checkpoint_path):
    stem, _ = os.path.splitext(checkpoint_path)
    return f"{stem}_metrics.csv"
