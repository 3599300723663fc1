#!/usr/bin/env python3
"""Capsule primitives, the four architectures and their gradients"""

import numpy as np
import pytest

import tensor_core as tc
from errors import ConfigError, ShapeError
from models import (
    ClassPoseBlock,
    ModelConfig,
    build_model,
    dynamic_routing,
    mask_poses,
    normalize_poses,
    parameter_count,
    squash,
)
from tensor_core import Tensor, no_grad
from training import TrainConfig, total_loss


def test_squash_known_values():
    out = squash(Tensor([[3.0, 4.0]])).data
    assert np.allclose(out, [[0.576923, 0.769231]], atol=1e-6)
    assert np.array_equal(squash(Tensor(np.zeros((2, 3)))).data, np.zeros((2, 3)))
    big = squash(Tensor([[100.0, 0.0]])).data
    assert np.linalg.norm(big) == pytest.approx(0.99990, abs=1e-5)


def test_squash_gradient_matches_finite_differences(rng):
    s = rng.standard_normal((3, 4))
    weights = rng.standard_normal((3, 4))
    x = Tensor(s, requires_grad=True)
    tc.reduce_sum(tc.mul(squash(x), Tensor(weights))).backward()

    def scalar(values):
        return float((squash(Tensor(values[0])).data * weights).sum())

    numeric = tc.numerical_gradient(scalar, [s])[0]
    assert np.linalg.norm(x.grad - numeric) <= 1e-6 * np.linalg.norm(numeric)


def test_single_iteration_routing_is_uniform(rng):
    predictions = rng.standard_normal((1, 1, 4, 3))
    block = dynamic_routing(Tensor(predictions), iterations=1)
    expected = squash(Tensor(predictions[:, 0] / 4.0)).data
    assert np.allclose(block.poses.data, expected)


def test_routing_couplings_are_distributions(rng):
    block = dynamic_routing(Tensor(rng.standard_normal((2, 5, 3, 4))), iterations=3)
    assert len(block.couplings) == 3
    for coupling in block.couplings:
        assert np.allclose(coupling.sum(axis=2), 1.0)
    assert np.all(block.class_scores.data >= 0.0) and np.all(block.class_scores.data < 1.0)


def test_mask_poses_keeps_one_class():
    block = ClassPoseBlock(poses=Tensor(np.ones((1, 10, 16))), class_scores=Tensor(np.zeros((1, 10))))
    masked = mask_poses(block, 3).data[0]
    assert masked.shape == (160,)
    assert np.array_equal(np.flatnonzero(masked), np.arange(48, 64))
    with pytest.raises(ConfigError):
        mask_poses(block, 10)


def test_normalize_poses_unit_length_and_zero_guard():
    poses = np.zeros((1, 2, 4))
    poses[0, 0, :2] = [3.0, 4.0]
    block = normalize_poses(ClassPoseBlock(poses=Tensor(poses), class_scores=Tensor(np.zeros((1, 2)))))
    assert np.allclose(block.poses.data[0, 0], [0.6, 0.8, 0.0, 0.0])
    assert np.array_equal(block.poses.data[0, 1], np.zeros(4))


def test_default_parameter_counts_are_comparable():
    counts = {arch: parameter_count(ModelConfig(architecture=arch)) for arch in ("capsule", "cnn_r", "masked_cnn_r")}
    assert counts["capsule"] == 8215568
    for arch in ("cnn_r", "masked_cnn_r"):
        assert abs(counts[arch] - counts["capsule"]) <= 0.05 * counts["capsule"]


@pytest.mark.parametrize("architecture", ["capsule", "cnn_r", "masked_cnn_r", "attacker_cnn"])
def test_forward_shapes(architecture, tiny_config, rng):
    config = tiny_config(architecture)
    model = build_model(config, seed=0)
    x = Tensor(rng.uniform(0.0, 1.0, size=(3, 1, 14, 14)))
    block = model.forward(x)
    assert block.class_scores.shape == (3, 10)
    if model.has_decoder:
        assert block.poses.shape == (3, 10, config.pose_dim)
        recon = model.reconstruct(block, np.array([0, 1, 2])).data
        assert recon.shape == (3, 196)
        assert np.all(recon > 0.0) and np.all(recon < 1.0)
    else:
        assert block.poses is None
    assert model.predict(x.data).shape == (3,)


def test_zero_input_decodes_from_biases_only(tiny_config):
    model = build_model(tiny_config("capsule"), seed=1)
    for name in ("decoder.fc1.bias", "decoder.fc2.bias", "decoder.fc3.bias"):
        model.params[name].data = np.full(model.params[name].shape, 0.3)
    with no_grad():
        a = model.decode(Tensor(np.zeros((1, 40)))).data
    h = np.maximum(0.3 + np.zeros(8), 0.0)
    h = np.maximum(h @ model.params["decoder.fc2.weight"].data + 0.3, 0.0)
    expected = 1.0 / (1.0 + np.exp(-(h @ model.params["decoder.fc3.weight"].data + 0.3)))
    assert np.allclose(a[0], expected)


def test_cnn_r_reconstruction_ignores_class(tiny_config, rng):
    model = build_model(tiny_config("cnn_r"), seed=0)
    with no_grad():
        block = model.forward(Tensor(rng.uniform(size=(2, 1, 14, 14))))
        assert np.array_equal(model.reconstruct(block, 0).data, model.reconstruct(block, 7).data)


def test_attacker_has_no_decoder(tiny_config, rng):
    model = build_model(tiny_config("attacker_cnn"), seed=0)
    with pytest.raises(ConfigError):
        model.winning_distance(Tensor(rng.uniform(size=(1, 1, 14, 14))))


def test_bad_inputs_and_parameters_are_rejected(tiny_config):
    model = build_model(tiny_config("masked_cnn_r"), seed=0)
    with pytest.raises(ShapeError):
        model.forward(Tensor(np.zeros((1, 1, 12, 12))))
    params = model.arrays()
    params["fc.bias"] = np.zeros(3)
    with pytest.raises(ShapeError):
        build_model(tiny_config("masked_cnn_r"), params=params)
    with pytest.raises(ConfigError):
        build_model(ModelConfig(architecture="resnet"))


def test_same_seed_same_initialization(tiny_config):
    a = build_model(tiny_config("capsule"), seed=4).arrays()
    b = build_model(tiny_config("capsule"), seed=4).arrays()
    assert all(np.array_equal(a[name], b[name]) for name in a)


@pytest.mark.parametrize("architecture", ["capsule", "cnn_r", "masked_cnn_r", "attacker_cnn"])
def test_end_to_end_gradients_on_sampled_entries(architecture, tiny_config, rng):
    model = build_model(tiny_config(architecture), seed=3)
    images = rng.uniform(0.05, 0.95, size=(2, 1, 14, 14))
    labels = np.array([1, 4])
    config = TrainConfig()

    x = Tensor(images, requires_grad=True)
    loss, _ = total_loss(model, x, labels, config)
    loss.backward()

    def loss_value():
        with no_grad():
            return total_loss(model, Tensor(images), labels, config)[0].item()

    h = 1e-5
    analytic, numeric = [], []
    targets = [(name, p.data, p.grad) for name, p in model.params.items()] + [("input", images, x.grad)]
    for name, array, grad in targets:
        flat = array.reshape(-1)
        for k in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            original = flat[k]
            flat[k] = original + h
            upper = loss_value()
            flat[k] = original - h
            lower = loss_value()
            flat[k] = original
            analytic.append(grad.reshape(-1)[k])
            numeric.append((upper - lower) / (2.0 * h))
    analytic, numeric = np.array(analytic), np.array(numeric)
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
    assert np.linalg.norm(analytic - numeric) / scale <= 1e-3


def test_squash_norm_grows_with_input_norm(rng):
    direction = rng.standard_normal(5)
    direction /= np.linalg.norm(direction)
    radii = np.array([0.0, 0.1, 0.5, 1.0, 2.0, 5.0, 20.0])
    out = squash(Tensor(radii[:, None] * direction)).data
    norms = np.linalg.norm(out, axis=1)
    assert np.all(np.diff(norms) > 0) and np.all(norms < 1.0)


def test_routing_favours_the_agreeing_class():
    # capsule 1 agrees with class 0 and points away from class 1
    predictions = np.zeros((1, 2, 2, 2))
    predictions[0, 0, 0] = [2.0, 0.0]
    predictions[0, 0, 1] = [0.0, 2.0]
    predictions[0, 1, 0] = [1.0, 0.0]
    predictions[0, 1, 1] = [0.0, -1.0]
    block = dynamic_routing(Tensor(predictions), iterations=3)
    first, last = block.couplings[0], block.couplings[-1]
    assert np.allclose(first, 0.5)
    assert last[0, 1, 0] > last[0, 1, 1]
    assert last[0, 1, 0] > first[0, 1, 0]


def test_mask_poses_gradient_reaches_only_the_selected_class(rng):
    poses = Tensor(rng.standard_normal((2, 10, 4)), requires_grad=True)
    block = ClassPoseBlock(poses=poses, class_scores=Tensor(np.zeros((2, 10))))
    masked = mask_poses(block, np.array([3, 7]))
    tc.reduce_sum(tc.mul(masked, Tensor(rng.standard_normal((2, 40))))).backward()
    assert np.count_nonzero(poses.grad[0, 3]) == 4 and np.count_nonzero(poses.grad[1, 7]) == 4
    untouched = np.ones((2, 10), dtype=bool)
    untouched[0, 3] = untouched[1, 7] = False
    assert np.all(poses.grad[untouched] == 0.0)


def test_masking_twice_changes_nothing(rng):
    block = ClassPoseBlock(poses=Tensor(rng.standard_normal((1, 10, 4))), class_scores=Tensor(np.zeros((1, 10))))
    once = mask_poses(block, 6).data
    again = mask_poses(ClassPoseBlock(poses=Tensor(once.reshape(1, 10, 4)), class_scores=block.class_scores), 6)
    assert np.array_equal(again.data, once)


def test_class_scores_follow_the_poses(tiny_config, rng):
    x = Tensor(rng.uniform(size=(3, 1, 14, 14)))
    with no_grad():
        capsule = build_model(tiny_config("capsule"), seed=0).forward(x)
        masked = build_model(tiny_config("masked_cnn_r"), seed=0).forward(x)
    assert np.max(np.abs(capsule.class_scores.data - np.linalg.norm(capsule.poses.data, axis=2))) <= 1e-9
    assert np.max(np.abs(masked.class_scores.data - masked.poses.data.sum(axis=2))) <= 1e-9


def test_attacker_forward_is_deterministic(tiny_config, rng):
    model = build_model(tiny_config("attacker_cnn"), seed=0)
    images = rng.uniform(size=(4, 1, 14, 14))
    assert np.array_equal(model.class_scores(images), model.class_scores(images))


def test_untrained_capsnet_scores_are_not_constant(tiny_config, rng):
    model = build_model(tiny_config("capsule"), seed=0)
    scores = model.class_scores(rng.uniform(size=(4, 1, 14, 14)))
    assert np.ptp(scores) > 0.0
    assert np.all(np.ptp(scores, axis=1) > 0.0)
