#!/usr/bin/env python3
"""
The four networks: CapsNet with dynamic routing, CNN+R, Masked CNN+R, and the
plain attacker CNN used to craft black-box attacks.

Every model maps images [batch, 1, 28, 28] to a `ClassPoseBlock`. Models with
a decoder reconstruct the input from per-class latent vectors
(`num_classes x pose_dim`), masked to a single class for CapsNet and
Masked CNN+R, unmasked for CNN+R.
"""

import logging
from collections import OrderedDict
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

import tensor_core as tc
from checkpoint import config_entries, config_from_entries
from errors import ConfigError, ShapeError
from tensor_core import Function, Tensor, no_grad

logger = logging.getLogger(__name__)

ARCHITECTURES = ("capsule", "cnn_r", "masked_cnn_r", "attacker_cnn")
DECODER_ARCHITECTURES = ("capsule", "cnn_r", "masked_cnn_r")


@dataclass
class ModelConfig:
    architecture: str = "capsule"
    num_classes: int = 10
    pose_dim: int = 16
    routing_iterations: int = 3
    image_size: int = 28
    in_channels: int = 1
    # CapsNet
    conv1_channels: int = 256
    conv1_kernel: int = 9
    primary_capsules: int = 32
    primary_dim: int = 8
    primary_kernel: int = 9
    primary_stride: int = 2
    # CNN+R / Masked CNN+R, channels chosen for parameter parity with CapsNet
    cnn_kernel: int = 5
    cnn_channels: tuple = (256, 768)
    # attacker CNN
    attacker_kernel: int = 5
    attacker_channels: tuple = (32, 64)
    attacker_hidden: tuple = (512, 256)
    # shared decoder
    decoder_widths: tuple = (512, 1024)
    init_std: float = 0.05

    @property
    def feature_dim(self):
        return self.num_classes * self.pose_dim

    @property
    def pixels(self):
        return self.in_channels * self.image_size * self.image_size

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.architecture!r}; expected one of {ARCHITECTURES}")
        if self.pose_dim < 1:
            raise ConfigError("pose_dim must be >= 1")
        if self.routing_iterations < 1:
            raise ConfigError("routing_iterations must be >= 1")
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for name in ("cnn_channels", "attacker_channels", "attacker_hidden", "decoder_widths"):
            widths = getattr(self, name)
            if len(widths) != 2 or min(widths) < 1:
                raise ConfigError(f"{name} needs two positive widths, got {widths}")
        if self.init_std <= 0:
            raise ConfigError("init_std must be positive")

    def to_config(self, prefix="model."):
        return config_entries(self, prefix)

    @classmethod
    def from_config(cls, entries, prefix="model."):
        return config_from_entries(cls, entries, prefix)


@dataclass
class ClassPoseBlock:
    """
    Per-class latent vectors and class scores.

    poses: [batch, num_classes, pose_dim] (None for the attacker CNN)
    class_scores: [batch, num_classes]
    features: flat penultimate layer for the CNN models
    couplings: routing coefficients per iteration (CapsNet only)
    """
    poses: Tensor
    class_scores: Tensor
    features: Tensor = None
    couplings: list = field(default_factory=list)


# ---------------------------------------------------------------------------
# Capsule primitives
# ---------------------------------------------------------------------------

class Squash(Function):
    """v = (|s|^2 / (1 + |s|^2)) * s / |s| along the last axis; squash(0) = 0"""
    name = "squash"

    def forward(self, s):
        self.n2 = (s * s).sum(axis=-1, keepdims=True)
        self.scale = np.sqrt(self.n2) / (1.0 + self.n2)
        return s * self.scale

    def backward(self, grad):
        s = self.tensors[0].data
        norm = np.sqrt(self.n2)
        positive = norm > 0
        safe = np.where(positive, norm, 1.0)
        dscale = np.where(positive, (1.0 - self.n2) / (2.0 * safe * (1.0 + self.n2) ** 2), 0.0)
        return (grad * self.scale + 2.0 * dscale * s * (grad * s).sum(axis=-1, keepdims=True),)


def squash(s):
    return Squash.apply(s)


def dynamic_routing(predictions, iterations):
    """
    Routing by agreement.

    predictions: u_hat [batch, n_in, num_classes, pose_dim]. Routing logits
    start at zero and stay in the graph, so gradients flow through the
    coupling coefficients.
    """
    if iterations < 1:
        raise ConfigError("routing iterations must be >= 1")
    predictions = tc.as_tensor(predictions)
    if predictions.ndim != 4:
        raise ShapeError("dynamic_routing", predictions.shape, detail="expected [batch, n_in, classes, pose]")
    batch, n_in, num_classes, _ = predictions.shape

    logits = Tensor(np.zeros((batch, n_in, num_classes)))
    couplings = []
    poses = None
    for iteration in range(iterations):
        coupling = tc.softmax(logits, axis=2)
        couplings.append(coupling.data)
        poses = squash(tc.einsum("bij,bije->bje", coupling, predictions))
        if iteration < iterations - 1:
            logits = logits + tc.einsum("bije,bje->bij", predictions, poses)
    return ClassPoseBlock(poses=poses, class_scores=tc.l2_norm(poses, axis=-1), couplings=couplings)


def mask_poses(block, class_index):
    """Zero every class pose except `class_index` (scalar or per example); flatten"""
    poses = block.poses
    if poses is None:
        raise ConfigError("model has no class poses to mask")
    batch, num_classes, pose_dim = poses.shape
    index = np.broadcast_to(np.asarray(class_index, dtype=np.int64), (batch,))
    if np.any(index < 0) or np.any(index >= num_classes):
        raise ConfigError(f"class index out of range [0, {num_classes}): {np.unique(index).tolist()}")
    mask = np.zeros((batch, num_classes, pose_dim))
    mask[np.arange(batch), index, :] = 1.0
    return tc.reshape(tc.mul(poses, Tensor(mask)), (batch, num_classes * pose_dim))


def normalize_poses(block):
    """Scale every pose vector to unit length; exact-zero poses stay zero"""
    poses = block.poses.data
    norms = np.sqrt((poses * poses).sum(axis=-1, keepdims=True))
    unit = np.where(norms > 0, poses / np.where(norms > 0, norms, 1.0), 0.0)
    return ClassPoseBlock(poses=Tensor(unit), class_scores=block.class_scores,
                          features=block.features, couplings=block.couplings)


# ---------------------------------------------------------------------------
# Parameters
# ---------------------------------------------------------------------------

def _conv_out(size, kernel, stride=1):
    return (size - kernel) // stride + 1


def _decoder_specs(config):
    w1, w2 = config.decoder_widths
    return [
        ("decoder.fc1.weight", (config.feature_dim, w1), "dense"),
        ("decoder.fc1.bias", (w1,), "bias"),
        ("decoder.fc2.weight", (w1, w2), "dense"),
        ("decoder.fc2.bias", (w2,), "bias"),
        ("decoder.fc3.weight", (w2, config.pixels), "dense"),
        ("decoder.fc3.bias", (config.pixels,), "bias"),
    ]


def primary_grid(config):
    return _conv_out(_conv_out(config.image_size, config.conv1_kernel),
                     config.primary_kernel, config.primary_stride)


def _pooled_size(config, kernel):
    return _conv_out(_conv_out(config.image_size, kernel) // 2, kernel) // 2


def parameter_specs(config):
    """Ordered (name, shape, init kind) for every parameter of an architecture"""
    k = config.num_classes
    if config.architecture == "capsule":
        c1 = config.conv1_channels
        kp = config.primary_kernel
        n_in = config.primary_capsules * primary_grid(config) ** 2
        specs = [
            ("conv1.weight", (c1, config.in_channels, config.conv1_kernel, config.conv1_kernel), "conv"),
            ("conv1.bias", (c1,), "bias"),
            ("primary.weight", (config.primary_capsules * config.primary_dim, c1, kp, kp), "conv"),
            ("primary.bias", (config.primary_capsules * config.primary_dim,), "bias"),
            ("routing.weight", (n_in, k, config.pose_dim, config.primary_dim), "conv"),
        ]
        return specs + _decoder_specs(config)

    if config.architecture in ("cnn_r", "masked_cnn_r"):
        c1, c2 = config.cnn_channels
        kk = config.cnn_kernel
        side = _pooled_size(config, kk)
        specs = [
            ("conv1.weight", (c1, config.in_channels, kk, kk), "conv"),
            ("conv1.bias", (c1,), "bias"),
            ("conv2.weight", (c2, c1, kk, kk), "conv"),
            ("conv2.bias", (c2,), "bias"),
            ("fc.weight", (c2 * side * side, config.feature_dim), "dense"),
            ("fc.bias", (config.feature_dim,), "bias"),
        ]
        if config.architecture == "cnn_r":
            specs += [("head.weight", (config.feature_dim, k), "dense"), ("head.bias", (k,), "bias")]
        return specs + _decoder_specs(config)

    if config.architecture == "attacker_cnn":
        c1, c2 = config.attacker_channels
        h1, h2 = config.attacker_hidden
        kk = config.attacker_kernel
        side = _pooled_size(config, kk)
        return [
            ("conv1.weight", (c1, config.in_channels, kk, kk), "conv"),
            ("conv1.bias", (c1,), "bias"),
            ("conv2.weight", (c2, c1, kk, kk), "conv"),
            ("conv2.bias", (c2,), "bias"),
            ("fc1.weight", (c2 * side * side, h1), "dense"),
            ("fc1.bias", (h1,), "bias"),
            ("fc2.weight", (h1, h2), "dense"),
            ("fc2.bias", (h2,), "bias"),
            ("fc3.weight", (h2, k), "dense"),
            ("fc3.bias", (k,), "bias"),
        ]
    raise ConfigError(f"unknown architecture {config.architecture!r}")


def parameter_count(config):
    return int(sum(np.prod(shape) for _, shape, _ in parameter_specs(config)))


def _truncated_normal(rng, shape, std):
    values = rng.standard_normal(shape)
    outside = np.abs(values) > 2.0
    while np.any(outside):
        values[outside] = rng.standard_normal(int(outside.sum()))
        outside = np.abs(values) > 2.0
    return values * std


def initialize_parameters(config, seed=0):
    """
    Conv and routing weights: truncated normal with config.init_std.
    Dense weights: truncated normal with Glorot scale. Biases: zero.
    """
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for name, shape, kind in parameter_specs(config):
        if kind == "bias":
            params[name] = np.zeros(shape)
        elif kind == "conv":
            params[name] = _truncated_normal(rng, shape, config.init_std)
        else:
            params[name] = _truncated_normal(rng, shape, np.sqrt(2.0 / (shape[0] + shape[1])))
    return params


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

class Model:
    """Base class: parameter bookkeeping, prediction, reconstruction helpers"""

    has_decoder = True

    def __init__(self, config, params=None, seed=0):
        config.validate()
        self.config = config
        specs = parameter_specs(config)
        arrays = initialize_parameters(config, seed) if params is None else params
        self.params = OrderedDict()
        for name, shape, _ in specs:
            if name not in arrays:
                raise ShapeError("load_parameters", shape, detail=f"missing parameter {name}")
            array = np.asarray(arrays[name], dtype=np.float64)
            if array.shape != tuple(shape):
                raise ShapeError("load_parameters", array.shape, shape, detail=name)
            self.params[name] = Tensor(array, requires_grad=True)
        extra = set(arrays) - set(self.params)
        if extra:
            raise ShapeError("load_parameters", detail=f"unexpected parameters {sorted(extra)}")

    @property
    def architecture(self):
        return self.config.architecture

    def parameters(self):
        return list(self.params.values())

    def parameter_count(self):
        return int(sum(p.size for p in self.params.values()))

    def zero_grad(self):
        for p in self.params.values():
            p.zero_grad()

    def arrays(self):
        return OrderedDict((name, p.data.copy()) for name, p in self.params.items())

    def load_arrays(self, arrays):
        for name, array in arrays.items():
            self.params[name].data = np.asarray(array, dtype=np.float64)

    @contextmanager
    def frozen(self):
        """Parameters stop requiring grad, so only input gradients are computed"""
        previous = [p.requires_grad for p in self.params.values()]
        for p in self.params.values():
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, flag in zip(self.params.values(), previous):
                p.requires_grad = flag

    def _check_input(self, x):
        x = tc.as_tensor(x)
        c = self.config
        if x.ndim != 4 or x.shape[1:] != (c.in_channels, c.image_size, c.image_size):
            raise ShapeError(f"{self.architecture}_forward", x.shape,
                             (-1, c.in_channels, c.image_size, c.image_size))
        return x

    def _dense(self, x, prefix):
        return tc.add(tc.matmul(x, self.params[f"{prefix}.weight"]), self.params[f"{prefix}.bias"])

    def _conv(self, x, prefix, stride=1):
        return tc.conv2d(x, self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"], stride=stride)

    def forward(self, x):
        raise NotImplementedError

    def decode(self, masked):
        """Fully connected decoder: feature_dim -> w1 (relu) -> w2 (relu) -> pixels (sigmoid)"""
        if not self.has_decoder:
            raise ConfigError(f"{self.architecture} has no reconstruction decoder")
        h = tc.relu(self._dense(masked, "decoder.fc1"))
        h = tc.relu(self._dense(h, "decoder.fc2"))
        return tc.sigmoid(self._dense(h, "decoder.fc3"))

    def reconstruct(self, block, class_index):
        """Reconstruction conditioned on `class_index` (scalar or per example)"""
        return self.decode(mask_poses(block, class_index))

    def reconstruction_distance(self, x, block):
        """L2 distance between x and its reconstruction from the winning class"""
        winners = np.argmax(block.class_scores.data, axis=1)
        recon = self.reconstruct(block, winners)
        flat = tc.reshape(x, (x.shape[0], -1))
        return tc.l2_norm(tc.sub(flat, recon), axis=1), winners

    def winning_distance(self, x):
        x = self._check_input(x)
        return self.reconstruction_distance(x, self.forward(x))

    def class_scores(self, images, batch_size=256):
        """Class scores for a numpy image array, without recording a graph"""
        images = np.asarray(images, dtype=np.float64)
        out = []
        with no_grad():
            for start in range(0, images.shape[0], batch_size):
                out.append(self.forward(Tensor(images[start:start + batch_size])).class_scores.data)
        if not out:
            return np.zeros((0, self.config.num_classes))
        return np.concatenate(out, axis=0)

    def predict(self, images, batch_size=256):
        return np.argmax(self.class_scores(images, batch_size), axis=1)


class CapsNet(Model):
    """
    conv 9x9 (relu) -> primary capsules (conv 9x9 stride 2, squashed)
    -> per-pair transform matrices -> dynamic routing to class capsules
    """

    def forward(self, x):
        x = self._check_input(x)
        c = self.config
        batch = x.shape[0]
        grid = primary_grid(c)
        h = tc.relu(self._conv(x, "conv1"))
        p = self._conv(h, "primary", stride=c.primary_stride)
        p = tc.reshape(p, (batch, c.primary_capsules, c.primary_dim, grid, grid))
        p = tc.transpose(p, (0, 1, 3, 4, 2))
        u = squash(tc.reshape(p, (batch, c.primary_capsules * grid * grid, c.primary_dim)))
        u_hat = tc.einsum("bid,ijed->bije", u, self.params["routing.weight"])
        return dynamic_routing(u_hat, c.routing_iterations)


class _ConvFeatures(Model):
    """Two conv+relu+pool blocks and a fully connected penultimate layer"""

    def features(self, x):
        x = self._check_input(x)
        h = tc.max_pool2d(tc.relu(self._conv(x, "conv1")))
        h = tc.max_pool2d(tc.relu(self._conv(h, "conv2")))
        h = tc.reshape(h, (x.shape[0], -1))
        return tc.relu(self._dense(h, "fc"))


class MaskedCNNR(_ConvFeatures):
    """Penultimate layer split into one group per class; logit = group sum"""

    def forward(self, x):
        f = self.features(x)
        c = self.config
        poses = tc.reshape(f, (f.shape[0], c.num_classes, c.pose_dim))
        return ClassPoseBlock(poses=poses, class_scores=tc.reduce_sum(poses, axis=2), features=f)


class CNNR(_ConvFeatures):
    """Logits from a separate linear head; the decoder sees the whole penultimate layer"""

    def forward(self, x):
        f = self.features(x)
        c = self.config
        poses = tc.reshape(f, (f.shape[0], c.num_classes, c.pose_dim))
        return ClassPoseBlock(poses=poses, class_scores=self._dense(f, "head"), features=f)

    def reconstruct(self, block, class_index):
        return self.decode(block.features)


class AttackerCNN(Model):
    """conv 5x5 (relu, pool) -> conv 5x5 (relu, pool) -> fc (relu) -> fc (relu) -> fc"""

    has_decoder = False

    def forward(self, x):
        x = self._check_input(x)
        h = tc.max_pool2d(tc.relu(self._conv(x, "conv1")))
        h = tc.max_pool2d(tc.relu(self._conv(h, "conv2")))
        h = tc.reshape(h, (x.shape[0], -1))
        h = tc.relu(self._dense(h, "fc1"))
        h = tc.relu(self._dense(h, "fc2"))
        return ClassPoseBlock(poses=None, class_scores=self._dense(h, "fc3"))

    def reconstruct(self, block, class_index):
        raise ConfigError("attacker_cnn has no reconstruction decoder")


MODEL_CLASSES = {
    "capsule": CapsNet,
    "cnn_r": CNNR,
    "masked_cnn_r": MaskedCNNR,
    "attacker_cnn": AttackerCNN,
}


def build_model(config, params=None, seed=0):
    config.validate()
    model = MODEL_CLASSES[config.architecture](config, params=params, seed=seed)
    logger.info("Built %s with %d parameters", config.architecture, model.parameter_count())
    return model
