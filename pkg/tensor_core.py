#!/usr/bin/env python3
"""
Dense float64 tensors with reverse-mode automatic differentiation.

A `Tensor` wraps a NumPy array. Every differentiable operation is a `Function`
subclass; applying it records the function as the creator of its output when
any input requires a gradient. `Tensor.backward()` walks the recorded graph in
reverse topological order and leaves `grad` on every leaf that requires one.

Broadcasting is deliberately narrow: operands must share a shape, or one of
them is a 0-d scalar, or (add/sub only) the second operand is a bias matching
the trailing dimensions of the first.
"""

import logging
from contextlib import contextmanager

import numpy as np

from errors import GraphError, ShapeError

logger = logging.getLogger(__name__)

_GRAD_ENABLED = True


@contextmanager
def no_grad():
    """Disable graph recording inside the block"""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled():
    return _GRAD_ENABLED


def as_tensor(value):
    """Wrap arrays and Python numbers as constant tensors"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement `forward(*arrays, **kwargs)` returning an array and
    `backward(grad)` returning one gradient array (or None) per input tensor.
    """

    name = "function"

    def __init__(self, *tensors):
        self.tensors = tensors
        self.needs_grad = tuple(t.requires_grad for t in tensors)
        self.consumed = False

    def forward(self, *arrays, **kwargs):
        raise NotImplementedError(f"{self.name}: forward not implemented")

    def backward(self, grad):
        raise NotImplementedError(f"{self.name}: backward not implemented")

    @classmethod
    def apply(cls, *tensors, **kwargs):
        tensors = tuple(as_tensor(t) for t in tensors)
        func = cls(*tensors)
        out = func.forward(*(t.data for t in tensors), **kwargs)
        requires_grad = _GRAD_ENABLED and any(func.needs_grad)
        return Tensor(out, requires_grad=requires_grad, creator=func if requires_grad else None)


class Tensor:
    """An n-dimensional float64 array that can take part in an autodiff graph"""

    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, creator=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.creator = creator
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.creator is None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def backward(self):
        """Back-propagate from this scalar tensor to every leaf requiring grad"""
        Graph.from_loss(self).backward()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def numpy(self):
        return self.data

    def item(self):
        if self.size != 1:
            raise ShapeError("item", self.shape, detail="tensor is not a scalar")
        return float(self.data.reshape(()))

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return Slice.apply(self, index=index)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return reduce_mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)


class Graph:
    """Recorded operations reachable from a loss, in topological order"""

    def __init__(self, loss, nodes):
        self.loss = loss
        self.nodes = nodes

    @classmethod
    def from_loss(cls, loss):
        if loss.size != 1:
            raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
        if loss.creator is not None and loss.creator.consumed:
            raise GraphError("backward called twice on a consumed graph")

        order = []
        visited = set()
        stack = [(loss, False)]
        while stack:
            node, finished = stack.pop()
            if finished:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            if node.creator is not None:
                for parent in node.creator.tensors:
                    if parent.requires_grad and id(parent) not in visited:
                        stack.append((parent, False))
        return cls(loss, order)

    def backward(self):
        for node in self.nodes:
            if node.creator is not None and node.creator.consumed:
                raise GraphError("graph contains operations from a consumed backward pass")

        pending = {id(self.loss): np.ones_like(self.loss.data)}
        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            if node.creator is None:
                if node.requires_grad:
                    node.grad = grad.copy() if node.grad is None else node.grad + grad
                continue
            func = node.creator
            parent_grads = func.backward(grad)
            func.consumed = True
            for parent, parent_grad in zip(func.tensors, parent_grads):
                if parent_grad is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + parent_grad
                else:
                    pending[key] = parent_grad


# ---------------------------------------------------------------------------
# Shape helpers
# ---------------------------------------------------------------------------

def _check_elementwise(op, a, b, allow_bias):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    if allow_bias and 0 < b.ndim < a.ndim and a.shape[-b.ndim:] == b.shape:
        return
    if allow_bias and 0 < a.ndim < b.ndim and b.shape[-a.ndim:] == a.shape:
        return
    raise ShapeError(op, a.shape, b.shape)


def _reduce_to(grad, shape):
    """Sum a broadcast gradient back down to `shape`"""
    if grad.shape == shape:
        return grad
    if len(shape) == 0:
        return np.asarray(grad.sum())
    lead = grad.ndim - len(shape)
    return grad.sum(axis=tuple(range(lead)))


def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


# ---------------------------------------------------------------------------
# Elementwise arithmetic
# ---------------------------------------------------------------------------

class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_elementwise(self.name, a, b, allow_bias=True)
        return a + b

    def backward(self, grad):
        a, b = self.tensors
        return _reduce_to(grad, a.shape), _reduce_to(grad, b.shape)


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _check_elementwise(self.name, a, b, allow_bias=True)
        return a - b

    def backward(self, grad):
        a, b = self.tensors
        return _reduce_to(grad, a.shape), _reduce_to(-grad, b.shape)


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_elementwise(self.name, a, b, allow_bias=False)
        return a * b

    def backward(self, grad):
        a, b = self.tensors
        grad_a = _reduce_to(grad * b.data, a.shape) if self.needs_grad[0] else None
        grad_b = _reduce_to(grad * a.data, b.shape) if self.needs_grad[1] else None
        return grad_a, grad_b


class Neg(Function):
    name = "neg"

    def forward(self, x):
        return -x

    def backward(self, grad):
        return (-grad,)


class Square(Function):
    name = "square"

    def forward(self, x):
        return x * x

    def backward(self, grad):
        return (2.0 * self.tensors[0].data * grad,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, x):
        self.out = np.sqrt(np.maximum(x, 0.0))
        return self.out

    def backward(self, grad):
        positive = self.out > 0
        safe = np.where(positive, self.out, 1.0)
        return (np.where(positive, 0.5 * grad / safe, 0.0),)


class Maximum(Function):
    """Elementwise max with a constant; gradient 0 at the tie"""
    name = "maximum"

    def forward(self, x, floor=0.0):
        self.floor = floor
        return np.maximum(x, floor)

    def backward(self, grad):
        return (grad * (self.tensors[0].data > self.floor),)


class Clip(Function):
    """Clamp to [lo, hi]; gradient passes strictly inside the interval only"""
    name = "clip"

    def forward(self, x, lo=0.0, hi=1.0):
        self.lo, self.hi = lo, hi
        return np.clip(x, lo, hi)

    def backward(self, grad):
        x = self.tensors[0].data
        return (grad * ((x > self.lo) & (x < self.hi)),)


# ---------------------------------------------------------------------------
# Activations
# ---------------------------------------------------------------------------

class ReLU(Function):
    name = "relu"

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return (grad * (self.tensors[0].data > 0),)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        self.out = 0.5 * (1.0 + np.tanh(0.5 * x))
        return self.out

    def backward(self, grad):
        return (grad * self.out * (1.0 - self.out),)


class Softmax(Function):
    name = "softmax"

    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        exp = np.exp(shifted)
        self.out = exp / exp.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, grad):
        y = self.out
        return (y * (grad - (grad * y).sum(axis=self.axis, keepdims=True)),)


class LogSoftmax(Function):
    name = "log_softmax"

    def forward(self, x, axis=-1):
        self.axis = axis
        shifted = x - x.max(axis=axis, keepdims=True)
        self.out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        return self.out

    def backward(self, grad):
        return (grad - np.exp(self.out) * grad.sum(axis=self.axis, keepdims=True),)


# ---------------------------------------------------------------------------
# Reductions
# ---------------------------------------------------------------------------

class Sum(Function):
    name = "sum"

    def forward(self, x, axis=None, keepdims=False):
        self.axes = _normalize_axes(axis, x.ndim)
        self.keepdims = keepdims
        return x.sum(axis=self.axes, keepdims=keepdims)

    def backward(self, grad):
        x = self.tensors[0].data
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axes)
        return (np.broadcast_to(grad, x.shape).copy(),)


class L2Norm(Function):
    """Euclidean norm along an axis; gradient 0 where the norm is 0"""
    name = "l2_norm"

    def forward(self, x, axis=-1, keepdims=False):
        self.axis = axis % x.ndim
        self.keepdims = keepdims
        self.norm = np.sqrt((x * x).sum(axis=self.axis, keepdims=True))
        return self.norm if keepdims else np.squeeze(self.norm, axis=self.axis)

    def backward(self, grad):
        x = self.tensors[0].data
        if not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        positive = self.norm > 0
        safe = np.where(positive, self.norm, 1.0)
        return (np.where(positive, grad * x / safe, 0.0),)


# ---------------------------------------------------------------------------
# Shape manipulation
# ---------------------------------------------------------------------------

class Reshape(Function):
    name = "reshape"

    def forward(self, x, shape=()):
        shape = tuple(int(s) for s in shape)
        if -1 in shape:
            known = int(np.prod([s for s in shape if s != -1]))
            if known == 0 or x.size % known:
                raise ShapeError(self.name, x.shape, shape)
            shape = tuple(x.size // known if s == -1 else s for s in shape)
        if int(np.prod(shape)) != x.size:
            raise ShapeError(self.name, x.shape, shape)
        return x.reshape(shape)

    def backward(self, grad):
        return (grad.reshape(self.tensors[0].shape),)


class Transpose(Function):
    name = "transpose"

    def forward(self, x, axes=None):
        self.axes = tuple(range(x.ndim))[::-1] if axes is None else tuple(axes)
        if sorted(a % x.ndim for a in self.axes) != list(range(x.ndim)):
            raise ShapeError(self.name, x.shape, self.axes, detail="axes are not a permutation")
        return x.transpose(self.axes)

    def backward(self, grad):
        return (grad.transpose(np.argsort(self.axes)),)


class Concat(Function):
    name = "concat"

    def forward(self, *arrays, axis=0):
        first = arrays[0]
        self.axis = axis % first.ndim
        for other in arrays[1:]:
            if other.ndim != first.ndim or any(
                    d1 != d2 for k, (d1, d2) in enumerate(zip(first.shape, other.shape)) if k != self.axis):
                raise ShapeError(self.name, first.shape, other.shape)
        self.bounds = np.cumsum([a.shape[self.axis] for a in arrays])[:-1]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        return tuple(np.split(grad, self.bounds, axis=self.axis))


class Slice(Function):
    """Basic (slice and integer) indexing"""
    name = "slice"

    def forward(self, x, index=()):
        self.index = index
        try:
            return np.array(x[index])
        except IndexError as exc:
            raise ShapeError(self.name, x.shape, detail=str(exc)) from exc

    def backward(self, grad):
        full = np.zeros_like(self.tensors[0].data)
        full[self.index] = grad
        return (full,)


# ---------------------------------------------------------------------------
# Linear algebra and convolution
# ---------------------------------------------------------------------------

class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise ShapeError(self.name, a.shape, b.shape)
        return a @ b

    def backward(self, grad):
        a, b = self.tensors
        grad_a = grad @ b.data.T if self.needs_grad[0] else None
        grad_b = a.data.T @ grad if self.needs_grad[1] else None
        return grad_a, grad_b


class Conv2d(Function):
    """
    Valid (unpadded) 2-D cross-correlation.

    x: [batch, channels, h, w]; weight: [out, channels, kh, kw]; optional
    bias: [out]. The kernel is applied one tap at a time so that no im2col
    buffer is materialised.
    """
    name = "conv2d"

    def forward(self, x, weight, bias=None, stride=1):
        if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
            raise ShapeError(self.name, x.shape, weight.shape)
        if bias is not None and bias.shape != (weight.shape[0],):
            raise ShapeError(self.name, weight.shape, bias.shape, detail="bias")
        _, _, h, w = x.shape
        _, _, kh, kw = weight.shape
        if h < kh or w < kw or stride < 1:
            raise ShapeError(self.name, x.shape, weight.shape, detail=f"stride {stride}")
        self.stride = stride
        self.out_h = (h - kh) // stride + 1
        self.out_w = (w - kw) // stride + 1

        out = np.zeros((x.shape[0], self.out_h, self.out_w, weight.shape[0]))
        for i in range(kh):
            for j in range(kw):
                out += np.tensordot(self._window(x, i, j), weight[:, :, i, j], axes=([1], [1]))
        out = out.transpose(0, 3, 1, 2)
        if bias is not None:
            out = out + bias[None, :, None, None]
        return np.ascontiguousarray(out)

    def _window(self, x, i, j):
        s = self.stride
        return x[:, :, i:i + s * (self.out_h - 1) + 1:s, j:j + s * (self.out_w - 1) + 1:s]

    def backward(self, grad):
        x = self.tensors[0].data
        weight = self.tensors[1].data
        _, _, kh, kw = weight.shape
        s = self.stride
        grad_t = grad.transpose(0, 2, 3, 1)
        need_x, need_w = self.needs_grad[0], self.needs_grad[1]

        grad_x = np.zeros_like(x) if need_x else None
        grad_w = np.zeros_like(weight) if need_w else None
        for i in range(kh):
            for j in range(kw):
                if need_w:
                    grad_w[:, :, i, j] = np.tensordot(grad_t, self._window(x, i, j), axes=([0, 1, 2], [0, 2, 3]))
                if need_x:
                    contribution = np.tensordot(grad_t, weight[:, :, i, j], axes=([3], [0]))
                    grad_x[:, :, i:i + s * (self.out_h - 1) + 1:s, j:j + s * (self.out_w - 1) + 1:s] += \
                        contribution.transpose(0, 3, 1, 2)

        grads = [grad_x, grad_w]
        if len(self.tensors) == 3:
            grads.append(grad.sum(axis=(0, 2, 3)) if self.needs_grad[2] else None)
        return tuple(grads)


class MaxPool2d(Function):
    """Non-overlapping max pooling; gradient goes to the first maximum of each window"""
    name = "max_pool2d"

    def forward(self, x, size=2):
        if x.ndim != 4 or x.shape[2] % size or x.shape[3] % size:
            raise ShapeError(self.name, x.shape, detail=f"window {size}")
        b, c, h, w = x.shape
        self.size = size
        windows = x.reshape(b, c, h // size, size, w // size, size).transpose(0, 1, 2, 4, 3, 5)
        windows = windows.reshape(b, c, h // size, w // size, size * size)
        self.argmax = windows.argmax(axis=-1)
        return np.take_along_axis(windows, self.argmax[..., None], axis=-1)[..., 0]

    def backward(self, grad):
        b, c, h, w = self.tensors[0].shape
        size = self.size
        windows = np.zeros((b, c, h // size, w // size, size * size))
        np.put_along_axis(windows, self.argmax[..., None], grad[..., None], axis=-1)
        windows = windows.reshape(b, c, h // size, w // size, size, size).transpose(0, 1, 2, 4, 3, 5)
        return (windows.reshape(b, c, h, w),)


class Einsum(Function):
    """
    Explicit-output Einstein summation ("ij,jk->ik"). Ellipses and repeated
    subscripts within one operand are not supported.
    """
    name = "einsum"

    def forward(self, *arrays, subscripts=""):
        if "->" not in subscripts or "." in subscripts:
            raise ShapeError(self.name, *(a.shape for a in arrays), detail=f"unsupported subscripts {subscripts!r}")
        inputs, self.output = subscripts.replace(" ", "").split("->")
        self.inputs = inputs.split(",")
        if len(self.inputs) != len(arrays):
            raise ShapeError(self.name, *(a.shape for a in arrays), detail=f"{subscripts!r} operand count")
        self.dims = {}
        for subs, arr in zip(self.inputs, arrays):
            if len(subs) != arr.ndim or len(set(subs)) != len(subs):
                raise ShapeError(self.name, *(a.shape for a in arrays), detail=subscripts)
            for letter, dim in zip(subs, arr.shape):
                if self.dims.setdefault(letter, dim) != dim:
                    raise ShapeError(self.name, *(a.shape for a in arrays), detail=f"{subscripts!r} index {letter}")
        return np.einsum(subscripts, *arrays, optimize=True)

    def backward(self, grad):
        grads = []
        for k, (subs, tensor) in enumerate(zip(self.inputs, self.tensors)):
            if not self.needs_grad[k]:
                grads.append(None)
                continue
            other_subs = [s for i, s in enumerate(self.inputs) if i != k]
            other_data = [t.data for i, t in enumerate(self.tensors) if i != k]
            available = set(self.output).union(*other_subs) if other_subs else set(self.output)
            target = "".join(letter for letter in subs if letter in available)
            expression = ",".join([self.output] + other_subs) + "->" + target
            partial = np.einsum(expression, grad, *other_data, optimize=True)
            if target != subs:
                shape = [self.dims[letter] if letter in available else 1 for letter in subs]
                partial = np.broadcast_to(partial.reshape(shape), tensor.shape).copy()
            grads.append(partial)
        return tuple(grads)


# ---------------------------------------------------------------------------
# Functional API
# ---------------------------------------------------------------------------

def add(a, b):
    return Add.apply(a, b)


def sub(a, b):
    return Sub.apply(a, b)


def mul(a, b):
    return Mul.apply(a, b)


def neg(x):
    return Neg.apply(x)


def matmul(a, b):
    return MatMul.apply(a, b)


def conv2d(x, weight, bias=None, stride=1):
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride)
    return Conv2d.apply(x, weight, bias, stride=stride)


def max_pool2d(x, size=2):
    return MaxPool2d.apply(x, size=size)


def relu(x):
    return ReLU.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def softmax(x, axis=-1):
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis=-1):
    return LogSoftmax.apply(x, axis=axis)


def reduce_sum(x, axis=None, keepdims=False):
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def reduce_mean(x, axis=None):
    x = as_tensor(x)
    count = int(np.prod([x.shape[a] for a in _normalize_axes(axis, x.ndim)]))
    return mul(reduce_sum(x, axis=axis), 1.0 / count)


def square(x):
    return Square.apply(x)


def sqrt(x):
    return Sqrt.apply(x)


def l2_norm(x, axis=-1, keepdims=False):
    return L2Norm.apply(x, axis=axis, keepdims=keepdims)


def maximum(x, floor):
    return Maximum.apply(x, floor=float(floor))


def reshape(x, shape):
    return Reshape.apply(x, shape=tuple(shape))


def transpose(x, axes=None):
    return Transpose.apply(x, axes=axes)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def slice_along(x, axis, start, stop):
    """x[..., start:stop, ...] on one axis"""
    x = as_tensor(x)
    index = [slice(None)] * x.ndim
    index[axis] = slice(start, stop)
    return Slice.apply(x, index=tuple(index))


def clip(x, lo, hi):
    return Clip.apply(x, lo=lo, hi=hi)


def einsum(subscripts, *tensors):
    return Einsum.apply(*tensors, subscripts=subscripts)


def one_hot(labels, num_classes):
    """Constant [n, num_classes] indicator tensor"""
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros((labels.shape[0], num_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return Tensor(out)


def numerical_gradient(fn, arrays, h=1e-5):
    """
    Central finite differences of a scalar function of several arrays.

    `fn` receives the list of arrays and returns a float; every entry of every
    array is perturbed by +-h in turn.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    grads = []
    for arr in arrays:
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        flat_grad = grad.reshape(-1)
        for k in range(flat.size):
            original = flat[k]
            flat[k] = original + h
            upper = fn(arrays)
            flat[k] = original - h
            lower = fn(arrays)
            flat[k] = original
            flat_grad[k] = (upper - lower) / (2.0 * h)
        grads.append(grad)
    return grads
