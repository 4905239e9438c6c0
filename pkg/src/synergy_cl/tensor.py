"""Dense tensors with tape-based reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active and at least one
operand requires a gradient; outside a tape everything runs as plain NumPy.
A tape is single-use: calling :meth:`Tape.backward` a second time raises
:class:`TapeError`.

    >>> w = Tensor([[1.0, 1.0]], requires_grad=True)
    >>> with Tape() as tape:
    ...     loss = matmul(w, Tensor([[2.0], [5.0]])).sum()
    >>> tape.backward(loss)
    >>> w.grad
    array([[2., 5.]])
"""
from __future__ import annotations

import threading

import numpy as np

from . import kernels

DEFAULT_DTYPE = np.float64


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class TapeError(RuntimeError):
    """A tape was reused or a loss does not belong to the tape."""


class StateError(RuntimeError):
    """An optimizer was asked to step without gradients."""


_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._tape = None

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
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def item(self):
        return self.data.item()

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def backward(self):
        if self._tape is None:
            raise TapeError("tensor was not produced on a tape")
        self._tape.backward(self)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor({self.data!r}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self):
        return mean(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def relu(self):
        return relu(self)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


class Tape:
    """Ordered record of primitive operations for one backward pass."""

    def __init__(self):
        self._ops = []
        self._used = False

    def __enter__(self):
        if self._used:
            raise TapeError("tape already consumed by backward()")
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.remove(self)
        return False

    def __len__(self):
        return len(self._ops)

    def record(self, out, parents, backward_fn):
        if self._used:
            raise TapeError("cannot record on a consumed tape")
        out.requires_grad = True
        out._tape = self
        self._ops.append((out, parents, backward_fn))

    def backward(self, loss):
        if self._used:
            raise TapeError("backward() already ran on this tape")
        if loss.size != 1:
            raise DimensionError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        self._used = True
        loss.grad = np.ones_like(loss.data)
        for out, parents, backward_fn in reversed(self._ops):
            g = out.grad
            if g is None:
                continue
            for parent, pg in zip(parents, backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                parent.grad = pg if parent.grad is None else parent.grad + pg


def _result(data, parents, backward_fn):
    out = Tensor(data)
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data + b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data - b.data, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _result(a.data * b.data, (a, b),
                   lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return _result(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a):
    a = as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got shape {a.shape}")
    return _result(a.data.T, (a,), lambda g: (g.T,))


def linear(x, weight, bias):
    """``x @ weight.T + bias`` with weight stored as (out, in)."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear shape mismatch: input {x.shape}, weight {weight.shape}")
    out = x.data @ weight.data.T
    out += bias.data

    def backward(g):
        return (g @ weight.data if x.requires_grad else None,
                g.T @ x.data if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return _result(out, (x, weight, bias), backward)


def tsum(a, axis=None):
    a = as_tensor(a)
    shape = a.shape

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axis)), (a,), backward)


def mean(a):
    a = as_tensor(a)
    n = a.size
    return _result(np.asarray(a.data.mean()), (a,),
                   lambda g: (np.full(a.shape, g / n, dtype=a.dtype),))


def reshape(a, shape):
    a = as_tensor(a)
    old = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def flatten(a):
    """Collapse all but the leading (batch) dimension."""
    a = as_tensor(a)
    return reshape(a, (a.shape[0], -1))


def relu(a):
    a = as_tensor(a)
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0).astype(a.dtype, copy=False), (a,),
                   lambda g: (g * mask,))


def conv2d(x, weight, bias, stride=1, padding=0):
    """Cross-correlation of an N x C x H x W batch with a C_out x C x kH x kW kernel."""
    x, weight, bias = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.ndim != 4 or weight.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    n, c, h, w = x.shape
    c_out, c_in, kh, kw = weight.shape
    if c != c_in:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    if bias.shape != (c_out,):
        raise DimensionError(f"conv2d bias shape {bias.shape} does not match {c_out} filters")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise DimensionError(
            f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * padding}x{w + 2 * padding}")
    if stride < 1:
        raise DimensionError(f"conv2d stride must be positive, got {stride}")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = np.ascontiguousarray(x.data)
    out = kernels.conv2d_forward(xp, weight.data, bias.data, stride)

    def backward(g):
        gx = gw = gb = None
        if x.requires_grad:
            gxp = kernels.conv2d_grad_input(g, weight.data, xp.shape[2], xp.shape[3], stride)
            gx = gxp[:, :, padding:padding + h, padding:padding + w] if padding else gxp
        if weight.requires_grad:
            gw = kernels.conv2d_grad_weight(xp, g, kh, kw, stride)
        if bias.requires_grad:
            gb = g.sum(axis=(0, 2, 3))
        return gx, gw, gb

    return _result(out, (x, weight, bias), backward)


def _log_softmax_array(z):
    shifted = z - z.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def log_softmax(logits):
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"log_softmax expects N x C logits, got {logits.shape}")
    out = _log_softmax_array(logits.data)
    probs = np.exp(out)
    return _result(out, (logits,),
                   lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def softmax(logits):
    """Row-wise softmax of an array (no gradient)."""
    z = logits.data if isinstance(logits, Tensor) else np.asarray(logits)
    return np.exp(_log_softmax_array(z))


def _check_labels(labels, n, c):
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise DimensionError(f"expected {n} labels, got shape {labels.shape}")
    if labels.dtype.kind not in "iu":
        labels = labels.astype(np.int64)
    if n and (labels.min() < 0 or labels.max() >= c):
        raise IndexError(f"label out of range [0, {c}): min {labels.min()}, max {labels.max()}")
    return labels


def softmax_cross_entropy(logits, labels, reduction="mean"):
    """Cross-entropy of integer labels; ``reduction`` is ``"mean"`` or ``"sum"``."""
    logits = as_tensor(logits)
    if logits.ndim != 2:
        raise DimensionError(f"cross-entropy expects N x C logits, got {logits.shape}")
    n, c = logits.shape
    labels = _check_labels(labels, n, c)
    logp = _log_softmax_array(logits.data)
    rows = np.arange(n)
    nll = -logp[rows, labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = nll.sum() * scale

    def backward(g):
        grad = np.exp(logp)
        grad[rows, labels] -= 1.0
        return (grad * (g * scale),)

    return _result(np.asarray(value, dtype=logits.dtype), (logits,), backward)


def mse(a, b):
    """Mean over every element of the squared difference."""
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise DimensionError(f"mse shape mismatch: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    value = np.asarray(np.square(diff).sum() / n, dtype=a.dtype)

    def backward(g):
        ga = diff * (2.0 * g / n)
        return ga, -ga

    return _result(value, (a, b), backward)


def sgd_step(params, lr):
    """Plain SGD: ``p -= lr * p.grad`` for every parameter, then clear gradients."""
    params = list(params)
    for i, p in enumerate(params):
        if p.grad is None:
            raise StateError(f"parameter {i} (shape {p.shape}) has no gradient")
    for p in params:
        p.data -= lr * p.grad
        p.grad = None
