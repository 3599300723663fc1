#!/usr/bin/env python3
"""
DARCCC: flag inputs whose reconstruction from the winning class is farther
than a calibrated L2 threshold.

Also hosts the argmin-distance classifier, detection metrics, distance
histograms and the CSV / PGM exports used to reproduce the figures.
"""

import csv
import logging
import math
import os
from dataclasses import dataclass

import numpy as np
from tqdm import tqdm

from checkpoint import config_entries, config_from_entries
from errors import CalibrationError, ConfigError, ShapeError
from models import normalize_poses
from tensor_core import Tensor, no_grad

logger = logging.getLogger(__name__)

METHODS = ("percentile", "train_max")
HISTOGRAM_BINS = 50
REPORT_COLUMNS = ["index", "true", "target", "pred_before", "pred_after", "distance", "flagged"]
CURVE_COLUMNS = ["family", "epsilon", "alpha", "steps", "gamma", "examples", "error_rate",
                 "attack_success_rate", "attack_detection_rate", "successful_attack_detection_rate",
                 "false_positive_rate"]


@dataclass
class Threshold:
    value: float = 0.0
    method: str = "percentile"
    percentile: float = 95.0
    calibration_size: int = 0

    def validate(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown calibration method {self.method!r}; expected one of {METHODS}")
        if not 0.0 < self.percentile <= 100.0:
            raise ConfigError(f"percentile must lie in (0, 100], got {self.percentile}")

    def to_config(self, prefix="threshold."):
        return config_entries(self, prefix)

    @classmethod
    def from_config(cls, entries, prefix="threshold."):
        return config_from_entries(cls, entries, prefix)


def store_threshold(checkpoint, threshold):
    checkpoint.config.update(threshold.to_config())
    return checkpoint


def load_threshold(checkpoint):
    """Threshold saved in a checkpoint, or None when it was never calibrated"""
    if "threshold.value" not in checkpoint.config:
        return None
    return Threshold.from_config(checkpoint.config)


def _threshold_value(threshold):
    return threshold.value if isinstance(threshold, Threshold) else float(threshold)


# ---------------------------------------------------------------------------
# Distances
# ---------------------------------------------------------------------------

def _require_decoder(model, what):
    if not model.has_decoder:
        raise ConfigError(f"{what} needs a decoder; {model.architecture} has none")


def winning_distances(model, images, batch_size=256, progress=False):
    """(distance, winning class) per example, batched, no graph recorded"""
    _require_decoder(model, "reconstruction distance")
    images = np.asarray(images, dtype=np.float64)
    distances, winners = [], []
    starts = range(0, images.shape[0], batch_size)
    with no_grad():
        for start in tqdm(starts, desc="distances", disable=not progress, leave=False):
            d, w = model.winning_distance(Tensor(images[start:start + batch_size]))
            distances.append(d.data)
            winners.append(w)
    if not distances:
        return np.zeros(0), np.zeros(0, dtype=np.int64)
    return np.concatenate(distances), np.concatenate(winners)


def reconstruction_distances(model, images, batch_size=256, progress=False):
    """L2 distance between each image and its winning-class reconstruction"""
    return winning_distances(model, images, batch_size, progress)[0]


def all_class_distances(model, images, normalize=False, batch_size=256):
    """[n, num_classes] distances to the reconstruction from every class"""
    _require_decoder(model, "class-conditional reconstruction")
    if normalize and model.architecture != "capsule":
        raise ConfigError(f"pose normalization needs capsule poses, not {model.architecture}")
    images = np.asarray(images, dtype=np.float64)
    num_classes = model.config.num_classes
    out = np.zeros((images.shape[0], num_classes))
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = Tensor(images[start:start + batch_size])
            block = model.forward(x)
            if normalize:
                block = normalize_poses(block)
            flat = x.data.reshape(x.shape[0], -1)
            for k in range(num_classes):
                recon = model.reconstruct(block, k).data
                out[start:start + x.shape[0], k] = np.sqrt(((flat - recon) ** 2).sum(axis=1))
    return out


def classify_by_distance(model, images, normalize=False, batch_size=256):
    """Class whose reconstruction is closest to the input; ties go to the lowest index"""
    return np.argmin(all_class_distances(model, images, normalize, batch_size), axis=1)


# ---------------------------------------------------------------------------
# Calibration and detection
# ---------------------------------------------------------------------------

def nearest_rank_percentile(values, percentile):
    """Smallest value with at least p% of the values at or below it"""
    values = np.sort(np.asarray(values, dtype=np.float64))
    if values.size == 0:
        raise CalibrationError("cannot take a percentile of an empty set")
    if not 0.0 < percentile <= 100.0:
        raise ConfigError(f"percentile must lie in (0, 100], got {percentile}")
    rank = max(1, math.ceil(round(percentile * values.size / 100.0, 9)))
    return float(values[rank - 1])


def calibrate_from_distances(distances, percentile=95.0, method="percentile"):
    distances = np.asarray(distances, dtype=np.float64)
    if distances.size == 0:
        raise CalibrationError("calibration set is empty")
    threshold = Threshold(method=method, percentile=float(percentile), calibration_size=int(distances.size))
    threshold.validate()
    if method == "train_max":
        threshold.value = float(distances.max())
    else:
        threshold.value = nearest_rank_percentile(distances, percentile)
    if not threshold.value > 0:
        raise CalibrationError(f"calibrated threshold {threshold.value} is not positive")
    return threshold


def calibrate(model, images, percentile=95.0, method="percentile", batch_size=256, progress=False):
    """
    Threshold from clean distances: nearest-rank percentile of a held-out set,
    or the maximum over the training set (method "train_max").
    """
    if not model.has_decoder:
        raise CalibrationError(f"{model.architecture} has no decoder to calibrate")
    if len(images) == 0:
        raise CalibrationError("calibration set is empty")
    distances = reconstruction_distances(model, images, batch_size, progress)
    threshold = calibrate_from_distances(distances, percentile, method)
    logger.info("Calibrated %s threshold %.6f over %d examples", method, threshold.value, distances.size)
    return threshold


def flag(distances, threshold):
    """Strictly greater than the threshold"""
    return np.asarray(distances) > _threshold_value(threshold)


def detect(model, images, threshold, batch_size=256):
    return flag(reconstruction_distances(model, images, batch_size), threshold)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

def _rate(numerator, denominator):
    return float(numerator) / denominator if denominator else 0.0


@dataclass
class DetectionReport:
    distances: np.ndarray
    flagged: np.ndarray
    true_labels: np.ndarray
    targets: np.ndarray
    pred_before: np.ndarray
    pred_after: np.ndarray
    clean_distances: np.ndarray
    clean_flagged: np.ndarray
    threshold: float
    targeted: bool = True

    def __len__(self):
        return int(self.distances.shape[0])

    @property
    def flipped(self):
        if self.targeted:
            return self.pred_after == self.targets
        return (self.pred_after != self.true_labels) & (self.pred_before == self.true_labels)

    @property
    def attack_success_rate(self):
        return _rate(self.flipped.sum(), len(self))

    @property
    def error_rate(self):
        return _rate((self.pred_after != self.true_labels).sum(), len(self))

    @property
    def attack_detection_rate(self):
        return _rate(self.flagged.sum(), len(self))

    @property
    def successful_attack_detection_rate(self):
        flipped = self.flipped
        return _rate((flipped & self.flagged).sum(), flipped.sum())

    @property
    def false_positive_rate(self):
        return _rate(self.clean_flagged.sum(), self.clean_flagged.shape[0])

    def summary(self):
        return {
            "examples": len(self),
            "threshold": self.threshold,
            "flipped": int(self.flipped.sum()),
            "flagged": int(self.flagged.sum()),
            "flipped_and_flagged": int((self.flipped & self.flagged).sum()),
            "error_rate": self.error_rate,
            "attack_success_rate": self.attack_success_rate,
            "attack_detection_rate": self.attack_detection_rate,
            "successful_attack_detection_rate": self.successful_attack_detection_rate,
            "false_positive_rate": self.false_positive_rate,
        }


def report(batch, model, threshold, batch_size=256):
    """Detection metrics for an adversarial batch; predictions are recomputed on `model`"""
    if batch.original.shape[1:] != (model.config.in_channels, model.config.image_size, model.config.image_size):
        raise ShapeError("report", batch.original.shape[1:],
                         (model.config.in_channels, model.config.image_size, model.config.image_size))
    value = _threshold_value(threshold)
    clean_distances, pred_before = winning_distances(model, batch.original, batch_size)
    distances, pred_after = winning_distances(model, batch.perturbed, batch_size)
    return DetectionReport(
        distances=distances,
        flagged=flag(distances, value),
        true_labels=np.asarray(batch.true_labels),
        targets=np.asarray(batch.targets),
        pred_before=pred_before,
        pred_after=pred_after,
        clean_distances=clean_distances,
        clean_flagged=flag(clean_distances, value),
        threshold=value,
        targeted=batch.spec.targeted,
    )


def distance_histogram(clean, adversarial, bins=HISTOGRAM_BINS):
    """Shared bins of width max/bins over [0, max distance]; returns (edges, clean, adv)"""
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    combined = np.concatenate([clean, adversarial])
    upper = float(combined.max()) if combined.size else 0.0
    if upper <= 0:
        upper = 1.0
    edges = np.linspace(0.0, upper, bins + 1)
    clean_counts, _ = np.histogram(clean, bins=edges)
    adv_counts, _ = np.histogram(adversarial, bins=edges)
    return edges, clean_counts, adv_counts


def separation_auc(clean, adversarial):
    """P(adversarial distance > clean distance), ties counted half (Mann-Whitney)"""
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if clean.size == 0 or adversarial.size == 0:
        raise ConfigError("separation AUC needs both clean and adversarial distances")
    combined = np.concatenate([adversarial, clean])
    order = np.argsort(combined, kind="mergesort")
    sorted_values = combined[order]
    ranks = np.empty(combined.size)
    _, first, counts = np.unique(sorted_values, return_index=True, return_counts=True)
    for start, count in zip(first, counts):
        ranks[order[start:start + count]] = start + (count + 1) / 2.0
    rank_sum = ranks[:adversarial.size].sum()
    n_adv, n_clean = adversarial.size, clean.size
    return float((rank_sum - n_adv * (n_adv + 1) / 2.0) / (n_adv * n_clean))


# ---------------------------------------------------------------------------
# Exports
# ---------------------------------------------------------------------------

def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def write_report_csv(detection, path, spec=None):
    """Per-example rows, then `# key=value` footer lines with the aggregates"""
    _ensure_parent(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(REPORT_COLUMNS)
        for i in range(len(detection)):
            writer.writerow([i, int(detection.true_labels[i]), int(detection.targets[i]),
                             int(detection.pred_before[i]), int(detection.pred_after[i]),
                             repr(float(detection.distances[i])), int(detection.flagged[i])])
        footer = dict(detection.summary())
        if spec is not None:
            footer.update(spec.to_config())
        for key, value in footer.items():
            fh.write(f"# {key}={value}\n")


def read_report_summary(path):
    """Footer of a report CSV as a dict; numeric values parsed"""
    summary = {}
    with open(path) as fh:
        for line in fh:
            if not line.startswith("# "):
                continue
            key, _, value = line[2:].rstrip("\n").partition("=")
            try:
                summary[key] = float(value)
            except ValueError:
                summary[key] = value
    return summary


def write_histogram_csv(path, edges, clean_counts, adv_counts):
    _ensure_parent(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["bin_low", "bin_high", "clean_count", "adv_count"])
        for i in range(len(edges) - 1):
            writer.writerow([repr(float(edges[i])), repr(float(edges[i + 1])),
                             int(clean_counts[i]), int(adv_counts[i])])


def curve_row(summary):
    """One curves-CSV row from a report footer"""
    row = {}
    for column in CURVE_COLUMNS:
        key = f"attack.{column}" if column in ("family", "epsilon", "alpha", "steps", "gamma") else column
        row[column] = summary.get(key, "")
    return row


def write_curves_csv(rows, path):
    """Rows sorted by (family, epsilon, steps)"""
    _ensure_parent(path)

    def order(row):
        return (str(row["family"]), float(row["epsilon"] or 0), float(row["steps"] or 0))

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
        writer.writeheader()
        for row in sorted(rows, key=order):
            writer.writerow(row)


def reconstruct_all_classes(model, images, normalize=False):
    """
    uint8 grid: row 0 holds the inputs, row k + 1 the reconstructions from
    class k, one column per image.
    """
    _require_decoder(model, "class-conditional reconstruction")
    if normalize and model.architecture != "capsule":
        raise ConfigError(f"pose normalization needs capsule poses, not {model.architecture}")
    images = np.asarray(images, dtype=np.float64)
    n = images.shape[0]
    side = model.config.image_size
    num_classes = model.config.num_classes
    rows = [images.reshape(n, side, side)]
    with no_grad():
        block = model.forward(Tensor(images))
        if normalize:
            block = normalize_poses(block)
        for k in range(num_classes):
            rows.append(model.reconstruct(block, k).data.reshape(n, side, side))
    grid = np.zeros(((num_classes + 1) * side, n * side))
    for r, row in enumerate(rows):
        for c in range(n):
            grid[r * side:(r + 1) * side, c * side:(c + 1) * side] = row[c]
    return np.clip(np.round(grid * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, grid):
    """Binary portable graymap (P5), 8-bit"""
    grid = np.asarray(grid, dtype=np.uint8)
    _ensure_parent(path)
    height, width = grid.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(grid.tobytes())
