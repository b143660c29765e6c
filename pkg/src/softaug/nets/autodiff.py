"""A small tape-free reverse-mode autodiff engine over numpy arrays.

Only the layer set the agents need is supported: dense and strided "valid"
convolutions, layer/batch normalization, and a handful of pointwise maps.
Each op records its parents and a closure producing parent gradients; calling
``Tensor.backward`` walks the graph in reverse topological order.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterator, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

_GRAD_ENABLED = True
_RELU_RECORDER: list | None = None


class NumericalError(ArithmeticError):
    """Raised when a loss or gradient becomes non-finite."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable graph construction inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


@contextlib.contextmanager
def record_relu_inputs() -> Iterator[list]:
    """Collect the sign pattern of every relu input evaluated in the block.

    Finite-difference checks use this to detect probes whose stencil
    straddles a relu kink, where the derivative is undefined.
    """
    global _RELU_RECORDER
    prev = _RELU_RECORDER
    _RELU_RECORDER = []
    try:
        yield _RELU_RECORDER
    finally:
        _RELU_RECORDER = prev


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    ndim_extra = g.ndim - len(shape)
    if ndim_extra > 0:
        g = g.sum(axis=tuple(range(ndim_extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    # -- graph traversal --------------------------------------------------

    def backward(self, grad: np.ndarray | None = None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a seed gradient needs a scalar output")
            grad = np.ones_like(self.data)
        if not np.all(np.isfinite(self.data)):
            raise NumericalError("non-finite value at the start of backward")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for p, pg in zip(node._parents, node._backward(g)):
                if pg is None or not p.requires_grad:
                    continue
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, reciprocal(as_tensor(other)))

    def __rtruediv__(self, other):
        return mul(reciprocal(self), other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# -- elementwise -------------------------------------------------------------


def add(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _node(a.data + b, (a,), lambda g: (g,))
    if isinstance(a, (int, float)):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g, a.shape) if a.requires_grad else None,
            _unbroadcast(g, b.shape) if b.requires_grad else None,
        )

    return _node(a.data + b.data, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        a = as_tensor(a)
        return _node(a.data * b, (a,), lambda g: (g * b,))
    if isinstance(a, (int, float)):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            _unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
            _unbroadcast(g * a.data, b.shape) if b.requires_grad else None,
        )

    return _node(a.data * b.data, (a, b), backward)


def reciprocal(a: Tensor) -> Tensor:
    y = 1.0 / a.data
    return _node(y, (a,), lambda g: (-g * y * y,))


def power(a: Tensor, exponent: float) -> Tensor:
    y = a.data**exponent
    return _node(y, (a,), lambda g: (g * exponent * a.data ** (exponent - 1),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _node(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    y = np.sqrt(a.data)
    return _node(y, (a,), lambda g: (0.5 * g / y,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _node(y, (a,), lambda g: (g * (1.0 - y * y),))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _RELU_RECORDER is not None:
        _RELU_RECORDER.append(mask.copy())
    return _node(a.data * mask, (a,), lambda g: (g * mask,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    y = np.logaddexp(0.0, x)

    def backward(g):
        return (g / (1.0 + np.exp(-x)),)

    return _node(y.astype(x.dtype, copy=False), (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    y = 1.0 / (1.0 + np.exp(-a.data))
    return _node(y, (a,), lambda g: (g * y * (1.0 - y),))


def minimum(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    pick_a = a.data <= b.data

    def backward(g):
        return (
            _unbroadcast(g * pick_a, a.shape) if a.requires_grad else None,
            _unbroadcast(g * ~pick_a, b.shape) if b.requires_grad else None,
        )

    return _node(np.minimum(a.data, b.data), (a, b), backward)


# -- shape -------------------------------------------------------------------


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    y = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(y), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.data.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / float(n))


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def getitem(a: Tensor, idx) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        full[idx] += g
        return (full,)

    return _node(a.data[idx], (a,), backward)


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) if p.requires_grad else None
            for i, p in enumerate(parts)
        )

    return _node(np.concatenate([p.data for p in parts], axis=axis), parts, backward)


# -- layers ------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (
            g @ b.data.T if a.requires_grad else None,
            a.data.T @ g if b.requires_grad else None,
        )

    return _node(a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` for ``x`` of shape (N, in)."""
    x, weight = as_tensor(x), as_tensor(weight)
    y = x.data @ weight.data.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        y = y + bias.data
        parents.append(bias)

    def backward(g):
        grads = [
            g @ weight.data if x.requires_grad else None,
            g.T @ x.data if weight.requires_grad else None,
        ]
        if bias is not None:
            grads.append(g.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _node(y, parents, backward)


def conv_output_size(size: int, kernel: int, stride: int) -> int:
    """Spatial size after a 'valid' convolution."""
    if size < kernel:
        raise ValueError(f"input size {size} smaller than kernel {kernel}")
    return (size - kernel) // stride + 1


def _patches(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    # (N, Ho, Wo, kh*kw*C) ordered (kh, kw, C), gathered in a single copy
    sn, sh, sw, sc = x.strides
    view = as_strided(x, (x.shape[0], ho, wo, kh, kw, x.shape[3]), (sn, sh * stride, sw * stride, sh, sw, sc))
    return np.ascontiguousarray(view).reshape(x.shape[0], ho, wo, kh * kw * x.shape[3])


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Channels-last cross-correlation with 'valid' padding.

    x: (N, H, W, C); weight: (O, kh, kw, C); returns (N, Ho, Wo, O).
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4 or x.shape[3] != weight.shape[3]:
        raise ValueError(f"conv2d shape mismatch: input {x.shape}, weight {weight.shape}")
    n, h, w, c = x.shape
    o, kh, kw, _ = weight.shape
    ho, wo = conv_output_size(h, kh, stride), conv_output_size(w, kw, stride)
    cols = _patches(x.data, kh, kw, stride, ho, wo).reshape(n * ho * wo, kh * kw * c)
    wmat = weight.data.reshape(o, -1)
    y = cols @ wmat.T
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        y += bias.data
        parents.append(bias)

    def backward(g):
        gmat = g.reshape(n * ho * wo, o)
        gx = None
        if x.requires_grad:
            w3 = wmat.reshape(o, kh * kw, c)
            gx = np.zeros_like(x.data)
            for k in range(kh * kw):
                i, j = divmod(k, kw)
                gx[:, i : i + stride * ho : stride, j : j + stride * wo : stride, :] += (gmat @ w3[:, k, :]).reshape(n, ho, wo, c)
        gw = (gmat.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(gmat.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    return _node(y.reshape(n, ho, wo, o), parents, backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return (
            gx,
            _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None,
            _unbroadcast(g, beta.shape) if beta.requires_grad else None,
        )

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
    update_stats: bool = True,
) -> Tensor:
    """Batch normalization over axis 0 of an (N, F) input.

    In training mode batch statistics are used and, if ``update_stats``,
    the running buffers are updated in place (unbiased variance).
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if not training:
        xhat = (x.data - running_mean) / np.sqrt(running_var + eps)
        inv = 1.0 / np.sqrt(running_var + eps)

        def backward_eval(g):
            return (
                g * gamma.data * inv if x.requires_grad else None,
                (g * xhat).sum(axis=0) if gamma.requires_grad else None,
                g.sum(axis=0) if beta.requires_grad else None,
            )

        return _node(xhat * gamma.data + beta.data, (x, gamma, beta), backward_eval)

    n = x.shape[0]
    if n < 2:
        raise ValueError("batch normalization in training mode needs a batch of at least 2")
    mu = x.data.mean(axis=0)
    xc = x.data - mu
    var = (xc * xc).mean(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    if update_stats:
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / (n - 1))

    def backward(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=0) - xhat * (gh * xhat).mean(axis=0))
        return (
            gx,
            (g * xhat).sum(axis=0) if gamma.requires_grad else None,
            g.sum(axis=0) if beta.requires_grad else None,
        )

    return _node(xhat * gamma.data + beta.data, (x, gamma, beta), backward)
