#!/usr/bin/env python3
"""
Adversarial image crafting: FGSM, targeted BIM, Reconstructive BIM (R-BIM),
and the black-box transfer harness.

Attack objectives are summed over the batch, so the gradient sign of each
example depends on that example alone. All outputs are clipped to [0, 1] and
stay inside the L-infinity ball of radius epsilon around the original.
"""

import csv
import logging
import os
from collections import OrderedDict
from dataclasses import dataclass
from typing import Optional

import numpy as np
from tqdm import tqdm

import tensor_core as tc
from checkpoint import Checkpoint, config_entries, config_from_entries, load_checkpoint, save_checkpoint
from errors import BoundsError, CheckpointError, ConfigError, DataFormatError, ShapeError
from tensor_core import Tensor
from training import cross_entropy, margin_loss

logger = logging.getLogger(__name__)

FAMILIES = ("fgsm", "bim", "rbim")
TARGET_MODES = ("none", "fixed", "next", "random", "all")
ATTACK_LOSSES = ("cross_entropy", "margin")
BALL_TOLERANCE = 1e-9

MANIFEST_NAME = "adversarial.csv"
TENSORS_NAME = "adversarial.drcc"


@dataclass
class AttackSpec:
    """
    family: fgsm | bim | rbim. For bim/rbim epsilon == alpha * steps.
    target_mode: none (untargeted, fgsm only) | fixed (target_class) | next
    ((label + 1) mod K) | random | all (every class but the true one).
    """
    family: str = "fgsm"
    epsilon: float = 0.3
    alpha: float = 0.01
    steps: int = 1
    target_mode: str = "none"
    target_class: Optional[int] = None
    gamma: float = 1.0
    loss: str = "cross_entropy"
    clip_min: float = 0.0
    clip_max: float = 1.0

    @classmethod
    def iterative(cls, family, alpha, steps, target_mode="next", target_class=None, gamma=1.0,
                  loss="cross_entropy"):
        return cls(family=family, epsilon=alpha * steps, alpha=alpha, steps=steps, target_mode=target_mode,
                   target_class=target_class, gamma=gamma, loss=loss)

    @property
    def targeted(self):
        return self.target_mode != "none"

    def validate(self):
        if self.family not in FAMILIES:
            raise ConfigError(f"unknown attack family {self.family!r}; expected one of {FAMILIES}")
        if self.target_mode not in TARGET_MODES:
            raise ConfigError(f"unknown target mode {self.target_mode!r}")
        if self.target_mode == "fixed" and self.target_class is None:
            raise ConfigError("fixed target mode needs target_class")
        if self.loss not in ATTACK_LOSSES:
            raise ConfigError(f"unknown attack loss {self.loss!r}")
        if self.epsilon < 0:
            raise ConfigError("epsilon must be >= 0")
        if self.gamma < 0:
            raise ConfigError("gamma must be >= 0")
        if not self.clip_min < self.clip_max:
            raise ConfigError("clip range is empty")
        if self.family in ("bim", "rbim"):
            if self.alpha <= 0 or self.steps < 1:
                raise ConfigError("iterative attacks need alpha > 0 and steps >= 1")
            if abs(self.epsilon - self.alpha * self.steps) > 1e-9 * max(1.0, self.epsilon):
                raise ConfigError(f"epsilon {self.epsilon} != alpha * steps = {self.alpha * self.steps}")
            if not self.targeted:
                raise ConfigError(f"{self.family} is a targeted attack; choose a target mode")

    def to_config(self, prefix="attack."):
        return config_entries(self, prefix)

    @classmethod
    def from_config(cls, entries, prefix="attack."):
        return config_from_entries(cls, entries, prefix)


@dataclass
class AdversarialBatch:
    original: np.ndarray
    perturbed: np.ndarray
    true_labels: np.ndarray
    targets: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray
    spec: AttackSpec
    source_index: np.ndarray = None

    def __len__(self):
        return int(self.true_labels.shape[0])

    @property
    def flipped(self):
        """Targeted: prediction reached the target. Untargeted: a correct prediction became wrong."""
        if self.spec.targeted:
            return self.pred_after == self.targets
        return (self.pred_after != self.true_labels) & (self.pred_before == self.true_labels)

    def check_bounds(self, tolerance=BALL_TOLERANCE):
        if self.perturbed.shape != self.original.shape:
            raise ShapeError("adversarial_batch", self.original.shape, self.perturbed.shape)
        if self.perturbed.size == 0:
            return
        if self.perturbed.min() < self.spec.clip_min - tolerance or self.perturbed.max() > self.spec.clip_max + tolerance:
            raise BoundsError("perturbed images leave the clip range")
        distance = np.abs(self.perturbed - self.original).max()
        if distance > self.spec.epsilon + tolerance:
            raise BoundsError(f"perturbation {distance} exceeds epsilon {self.spec.epsilon}")


# ---------------------------------------------------------------------------
# Gradients
# ---------------------------------------------------------------------------

def attack_loss(class_scores, labels, kind="cross_entropy"):
    """J(x, label) summed over the batch"""
    if kind == "margin":
        return tc.mul(margin_loss(class_scores, labels), float(class_scores.shape[0]))
    return cross_entropy(class_scores, labels, reduction="sum")


def input_gradient(model, images, labels, kind="cross_entropy", gamma=0.0):
    """
    Gradient w.r.t. the input of J(x, labels), plus gamma times the distance
    between x and its reconstruction from the currently winning class.
    """
    x = Tensor(images, requires_grad=True)
    with model.frozen():
        block = model.forward(x)
        objective = attack_loss(block.class_scores, labels, kind)
        if gamma > 0:
            distances, _ = model.reconstruction_distance(x, block)
            objective = tc.add(objective, tc.mul(tc.reduce_sum(distances), gamma))
        objective.backward()
    return x.grad


def fgsm_step(images, gradient, epsilon, targeted, clip_min=0.0, clip_max=1.0):
    """x + eps sign(g) (untargeted) or x - eps sign(g) (targeted), clipped"""
    direction = -1.0 if targeted else 1.0
    return np.clip(images + direction * epsilon * np.sign(gradient), clip_min, clip_max)


def fgsm(model, images, labels, epsilon, target=None, loss="cross_entropy", clip_min=0.0, clip_max=1.0):
    """
    Untargeted when `target` is None (ascend the true-label loss), otherwise
    descend the loss of `target`.
    """
    images = np.asarray(images, dtype=np.float64)
    if epsilon == 0:
        return images.copy()
    goal = labels if target is None else target
    gradient = input_gradient(model, images, goal, loss)
    return fgsm_step(images, gradient, epsilon, target is not None, clip_min, clip_max)


def _iterate(model, images, target, alpha, steps, gamma, loss, clip_min, clip_max):
    original = np.asarray(images, dtype=np.float64)
    epsilon = alpha * steps
    lower = np.maximum(original - epsilon, clip_min)
    upper = np.minimum(original + epsilon, clip_max)
    adversarial = original.copy()
    for _ in range(steps):
        gradient = input_gradient(model, adversarial, target, loss, gamma)
        adversarial = np.clip(adversarial - alpha * np.sign(gradient), lower, upper)
    return adversarial


def bim(model, images, target, alpha, steps, loss="cross_entropy", clip_min=0.0, clip_max=1.0):
    """Targeted basic iterative method with budget epsilon = alpha * steps"""
    return _iterate(model, images, target, alpha, steps, 0.0, loss, clip_min, clip_max)


def rbim(model, images, target, alpha, steps, gamma, loss="cross_entropy", clip_min=0.0, clip_max=1.0):
    """BIM that also descends gamma * reconstruction distance; gamma = 0 is exactly BIM"""
    if gamma > 0 and not model.has_decoder:
        raise ConfigError(f"R-BIM needs a decoder; {model.architecture} has none")
    return _iterate(model, images, target, alpha, steps, gamma, loss, clip_min, clip_max)


# ---------------------------------------------------------------------------
# Batched runs
# ---------------------------------------------------------------------------

def expand_targets(labels, spec, num_classes, seed=0):
    """(source index per attacked example, target class or -1)"""
    labels = np.asarray(labels, dtype=np.int64)
    n = labels.shape[0]
    if spec.target_mode == "none":
        return np.arange(n), np.full(n, -1, dtype=np.int64)
    if spec.target_mode == "fixed":
        if not 0 <= spec.target_class < num_classes:
            raise ConfigError(f"target class {spec.target_class} out of range [0, {num_classes})")
        keep = np.flatnonzero(labels != spec.target_class)
        return keep, np.full(keep.shape[0], spec.target_class, dtype=np.int64)
    if spec.target_mode == "next":
        return np.arange(n), (labels + 1) % num_classes
    if spec.target_mode == "random":
        offset = np.random.default_rng(seed).integers(1, num_classes, size=n)
        return np.arange(n), (labels + offset) % num_classes
    source, targets = [], []
    for i, label in enumerate(labels):
        for k in range(num_classes):
            if k != label:
                source.append(i)
                targets.append(k)
    return np.asarray(source, dtype=np.int64), np.asarray(targets, dtype=np.int64)


def craft(model, images, labels, targets, spec):
    """Apply the attack described by `spec` to one batch"""
    if spec.family == "fgsm":
        return fgsm(model, images, labels, spec.epsilon, targets if spec.targeted else None,
                    spec.loss, spec.clip_min, spec.clip_max)
    if spec.family == "bim":
        return bim(model, images, targets, spec.alpha, spec.steps, spec.loss, spec.clip_min, spec.clip_max)
    return rbim(model, images, targets, spec.alpha, spec.steps, spec.gamma, spec.loss,
                spec.clip_min, spec.clip_max)


def run_attack(model, images, labels, spec, batch_size=100, seed=0, evaluator=None, progress=False):
    """
    Attack every example (expanded by the target mode) on `model`. Predictions
    before/after come from `evaluator` (default: the attacked model).
    """
    spec.validate()
    evaluator = evaluator or model
    source, targets = expand_targets(labels, spec, model.config.num_classes, seed)
    original = np.asarray(images, dtype=np.float64)[source]
    true_labels = np.asarray(labels, dtype=np.int64)[source]

    pieces = []
    starts = range(0, original.shape[0], batch_size)
    for start in tqdm(starts, desc=f"{spec.family} attack", disable=not progress, leave=False):
        stop = start + batch_size
        pieces.append(craft(model, original[start:stop], true_labels[start:stop], targets[start:stop], spec))
    perturbed = np.concatenate(pieces, axis=0) if pieces else original.copy()

    batch = AdversarialBatch(
        original=original,
        perturbed=perturbed,
        true_labels=true_labels,
        targets=targets,
        pred_before=evaluator.predict(original),
        pred_after=evaluator.predict(perturbed),
        spec=spec,
        source_index=source,
    )
    batch.check_bounds()
    logger.info("%s eps=%.4f steps=%d: %d examples, success rate %.4f",
                spec.family, spec.epsilon, spec.steps, len(batch), float(batch.flipped.mean()) if len(batch) else 0.0)
    return batch


def blackbox_transfer(attacker, defender, images, labels, epsilons, batch_size=100, progress=False):
    """
    Untargeted FGSM crafted on `attacker` and evaluated on `defender`, one
    AdversarialBatch per epsilon. The input gradient is computed once.
    """
    a, d = attacker.config, defender.config
    if (a.in_channels, a.image_size) != (d.in_channels, d.image_size):
        raise ShapeError("blackbox_transfer", (a.in_channels, a.image_size, a.image_size),
                         (d.in_channels, d.image_size, d.image_size))
    original = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    gradients = []
    starts = range(0, original.shape[0], batch_size)
    for start in tqdm(starts, desc="attacker gradients", disable=not progress, leave=False):
        stop = start + batch_size
        gradients.append(input_gradient(attacker, original[start:stop], labels[start:stop]))
    gradient = np.concatenate(gradients, axis=0) if gradients else np.zeros_like(original)
    pred_before = defender.predict(original)

    results = OrderedDict()
    for epsilon in epsilons:
        spec = AttackSpec(family="fgsm", epsilon=float(epsilon))
        spec.validate()
        perturbed = original.copy() if epsilon == 0 else fgsm_step(original, gradient, epsilon, False)
        batch = AdversarialBatch(
            original=original,
            perturbed=perturbed,
            true_labels=labels,
            targets=np.full(labels.shape[0], -1, dtype=np.int64),
            pred_before=pred_before,
            pred_after=defender.predict(perturbed),
            spec=spec,
            source_index=np.arange(labels.shape[0]),
        )
        batch.check_bounds()
        results[float(epsilon)] = batch
        error_rate = float((batch.pred_after != labels).mean()) if len(batch) else 0.0
        print(f"[Attack] black-box eps={epsilon:g}: defender error rate {error_rate:.4f}, "
              f"flipped {int(batch.flipped.sum())}")
    return results


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_adversarial_batch(batch, directory):
    """Manifest CSV plus original/perturbed images in the checkpoint tensor table"""
    os.makedirs(directory, exist_ok=True)
    with open(os.path.join(directory, MANIFEST_NAME), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["index", "source_index", "true_label", "target", "pred_before", "pred_after"])
        for i in range(len(batch)):
            writer.writerow([i, int(batch.source_index[i]), int(batch.true_labels[i]), int(batch.targets[i]),
                             int(batch.pred_before[i]), int(batch.pred_after[i])])
    tensors = OrderedDict([("original", batch.original), ("perturbed", batch.perturbed)])
    save_checkpoint(os.path.join(directory, TENSORS_NAME),
                    Checkpoint(architecture="adversarial_batch", config=batch.spec.to_config(), tensors=tensors))


def load_adversarial_batch(directory):
    manifest = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(manifest, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise DataFormatError(manifest, f"cannot read manifest ({exc})") from exc
    stored = load_checkpoint(os.path.join(directory, TENSORS_NAME))
    if stored.architecture != "adversarial_batch":
        raise CheckpointError(f"{directory}: expected an adversarial batch, found {stored.architecture!r}")
    original = stored.tensors["original"].astype(np.float64)
    perturbed = stored.tensors["perturbed"].astype(np.float64)
    if len(rows) != original.shape[0]:
        raise DataFormatError(manifest, f"{len(rows)} manifest rows for {original.shape[0]} images")

    def column(name):
        return np.asarray([int(row[name]) for row in rows], dtype=np.int64)

    return AdversarialBatch(
        original=original,
        perturbed=perturbed,
        true_labels=column("true_label"),
        targets=column("target"),
        pred_before=column("pred_before"),
        pred_after=column("pred_after"),
        spec=AttackSpec.from_config(stored.config),
        source_index=column("source_index"),
    )
