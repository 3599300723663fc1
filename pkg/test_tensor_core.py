#!/usr/bin/env python3
"""Autodiff engine: forward values, gradients against finite differences, errors"""

import numpy as np
import pytest

import tensor_core as tc
from errors import GraphError, ShapeError
from tensor_core import Graph, Tensor, no_grad, numerical_gradient


def naive_conv2d(x, w, b, stride):
    batch, channels, h, width = x.shape
    out_channels, _, kh, kw = w.shape
    oh = (h - kh) // stride + 1
    ow = (width - kw) // stride + 1
    out = np.zeros((batch, out_channels, oh, ow))
    for n in range(batch):
        for o in range(out_channels):
            for i in range(oh):
                for j in range(ow):
                    total = b[o] if b is not None else 0.0
                    for c in range(channels):
                        for di in range(kh):
                            for dj in range(kw):
                                total += x[n, c, i * stride + di, j * stride + dj] * w[o, c, di, dj]
                    out[n, o, i, j] = total
    return out


def naive_matmul(a, b):
    out = np.zeros((a.shape[0], b.shape[1]))
    for i in range(a.shape[0]):
        for j in range(b.shape[1]):
            for k in range(a.shape[1]):
                out[i, j] += a[i, k] * b[k, j]
    return out


def relative_error(analytic, numeric):
    scale = max(np.linalg.norm(numeric), np.linalg.norm(analytic), 1e-8)
    return np.linalg.norm(analytic - numeric) / scale


def check_gradients(build, arrays, seed=0, tolerance=1e-4):
    """Compare autodiff to central differences for a random projection of build(*tensors)"""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = build(*tensors)
    weights = np.random.default_rng(seed).standard_normal(out.shape)
    tc.reduce_sum(tc.mul(out, Tensor(weights))).backward()

    def scalar(values):
        with no_grad():
            return float((build(*[Tensor(v) for v in values]).data * weights).sum())

    numeric = numerical_gradient(scalar, arrays)
    for tensor, expected in zip(tensors, numeric):
        assert tensor.grad is not None
        assert relative_error(tensor.grad, expected) <= tolerance


def test_matmul_identity():
    a = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(tc.matmul(Tensor(np.eye(3)), Tensor(a)).data, a)


def test_conv2d_ones_with_scaling_kernel():
    x = Tensor(np.ones((1, 1, 3, 3)))
    w = Tensor(np.full((1, 1, 1, 1), 2.0))
    assert np.array_equal(tc.conv2d(x, w).data, np.full((1, 1, 3, 3), 2.0))


def test_conv2d_matches_naive_loops(rng):
    x = rng.standard_normal((1, 2, 5, 5))
    w = rng.standard_normal((3, 2, 3, 3))
    out = tc.conv2d(Tensor(x), Tensor(w), stride=2).data
    assert out.shape == (1, 3, 2, 2)
    assert np.max(np.abs(out - naive_conv2d(x, w, None, 2))) <= 1e-10


def test_conv2d_and_matmul_match_naive_on_random_shapes(rng):
    for _ in range(50):
        batch, channels, out_channels = rng.integers(1, 3), rng.integers(1, 3), rng.integers(1, 4)
        k = int(rng.integers(1, 4))
        size = int(rng.integers(k, k + 4))
        stride = int(rng.integers(1, 3))
        x = rng.standard_normal((batch, channels, size, size))
        w = rng.standard_normal((out_channels, channels, k, k))
        b = rng.standard_normal(out_channels)
        out = tc.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride).data
        assert np.max(np.abs(out - naive_conv2d(x, w, b, stride))) <= 1e-10

        m, n, p = rng.integers(1, 6, size=3)
        a = rng.standard_normal((m, n))
        c = rng.standard_normal((n, p))
        assert np.max(np.abs(tc.matmul(Tensor(a), Tensor(c)).data - naive_matmul(a, c))) <= 1e-10


def test_backward_sum_of_squares():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    tc.reduce_sum(tc.mul(x, x)).backward()
    assert np.allclose(x.grad, [2.0, 4.0, 6.0])


def test_gradient_accumulates_over_shared_inputs():
    x = Tensor([1.0, -2.0], requires_grad=True)
    y = tc.add(tc.square(x), tc.mul(x, 3.0))
    tc.reduce_sum(y).backward()
    assert np.allclose(x.grad, 2.0 * x.data + 3.0)


@pytest.mark.parametrize("name, build, shapes", [
    ("add_bias", lambda a, b: tc.add(a, b), [(3, 4), (4,)]),
    ("sub", lambda a, b: tc.sub(a, b), [(2, 3), (2, 3)]),
    ("mul", lambda a, b: tc.mul(a, b), [(2, 3), (2, 3)]),
    ("matmul", lambda a, b: tc.matmul(a, b), [(3, 4), (4, 2)]),
    ("conv2d", lambda x, w, b: tc.conv2d(x, w, b, stride=2), [(2, 2, 5, 5), (3, 2, 3, 3), (3,)]),
    ("sigmoid", lambda x: tc.sigmoid(x), [(3, 4)]),
    ("softmax", lambda x: tc.softmax(x, axis=1), [(3, 4)]),
    ("log_softmax", lambda x: tc.log_softmax(x, axis=0), [(3, 4)]),
    ("sum_axis", lambda x: tc.reduce_sum(x, axis=1), [(3, 4, 2)]),
    ("mean", lambda x: tc.reduce_mean(x, axis=0), [(3, 4)]),
    ("square", lambda x: tc.square(x), [(5,)]),
    ("l2_norm", lambda x: tc.l2_norm(x, axis=-1), [(3, 4)]),
    ("reshape", lambda x: tc.reshape(x, (4, -1)), [(2, 6)]),
    ("transpose", lambda x: tc.transpose(x, (2, 0, 1)), [(2, 3, 4)]),
    ("concat", lambda a, b: tc.concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("slice", lambda x: tc.slice_along(x, 1, 1, 3), [(2, 4)]),
    ("einsum", lambda a, b: tc.einsum("bid,ijed->bije", a, b), [(2, 3, 2), (3, 4, 2, 2)]),
    ("einsum_private_index", lambda a, b: tc.einsum("ij,jk->i", a, b), [(2, 3), (3, 4)]),
])
def test_gradients_match_finite_differences(name, build, shapes, rng):
    arrays = [rng.standard_normal(shape) for shape in shapes]
    check_gradients(build, arrays)


def test_gradients_of_piecewise_ops_away_from_kinks(rng):
    values = rng.uniform(0.1, 1.0, size=(4, 4)) * rng.choice([-1.0, 1.0], size=(4, 4))
    check_gradients(tc.relu, [values])
    check_gradients(lambda x: tc.maximum(x, 0.05), [values + 0.0123])
    check_gradients(lambda x: tc.clip(x, -0.5, 0.5), [np.array([[-0.9, -0.3, 0.2, 0.45], [0.7, -0.6, 0.1, 0.35]])])
    check_gradients(tc.sqrt, [np.abs(values) + 0.5])
    distinct = rng.permutation(16).reshape(1, 1, 4, 4) * 0.1
    check_gradients(tc.max_pool2d, [distinct])


def test_subgradients_at_kinks_are_zero():
    x = Tensor([0.0, 1.0, 2.0, -1.0], requires_grad=True)
    tc.reduce_sum(tc.relu(x)).backward()
    assert np.array_equal(x.grad, [0.0, 1.0, 1.0, 0.0])

    y = Tensor([0.0, 0.5, 1.0, 1.5], requires_grad=True)
    tc.reduce_sum(tc.clip(y, 0.0, 1.0)).backward()
    assert np.array_equal(y.grad, [0.0, 1.0, 0.0, 0.0])


def test_softmax_rows_sum_to_one_and_ignore_shifts(rng):
    x = rng.standard_normal((3, 5)) * 50.0
    p = tc.softmax(Tensor(x), axis=1).data
    assert np.allclose(p.sum(axis=1), 1.0)
    assert np.allclose(p, tc.softmax(Tensor(x + 1000.0), axis=1).data)


def test_concat_then_slice_recovers_parts(rng):
    a, b = rng.standard_normal((2, 3)), rng.standard_normal((2, 4))
    joined = tc.concat([Tensor(a), Tensor(b)], axis=1)
    assert np.array_equal(tc.slice_along(joined, 1, 0, 3).data, a)
    assert np.array_equal(tc.slice_along(joined, 1, 3, 7).data, b)


def test_shape_mismatch_names_op_and_shapes():
    with pytest.raises(ShapeError) as info:
        tc.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 2))))
    message = str(info.value)
    assert "add" in message and "(2, 3)" in message and "(3, 2)" in message

    with pytest.raises(ShapeError):
        tc.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_non_scalar_loss_is_rejected():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(GraphError):
        tc.mul(x, 2.0).backward()


def test_second_backward_on_consumed_graph_fails():
    x = Tensor(np.ones(3), requires_grad=True)
    loss = tc.reduce_sum(tc.square(x))
    loss.backward()
    with pytest.raises(GraphError):
        loss.backward()


def test_graph_is_topologically_ordered():
    x = Tensor(np.ones(2), requires_grad=True)
    h = tc.square(x)
    loss = tc.reduce_sum(tc.add(h, x))
    nodes = Graph.from_loss(loss).nodes
    position = {id(node): i for i, node in enumerate(nodes)}
    assert position[id(x)] < position[id(h)] < position[id(loss)]


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with no_grad():
        y = tc.square(x)
    assert y.creator is None and not y.requires_grad
    assert tc.square(x).creator is not None
