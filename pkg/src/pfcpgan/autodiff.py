"""Minimal reverse-mode autodiff over numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` plus an optional backward closure.
Graphs are built by the op functions below; ``Tensor.backward()`` runs the
tape in reverse topological order, accumulating gradients at fan-out points.
Ops short-circuit when no parent requires grad, so constant subgraphs (the
frozen perceptual network's weights, discriminator weights during a
generator step) cost nothing to track.

All ops preserve the input dtype; scalars are cast before arithmetic so
float32 graphs stay float32.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import DimensionError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad=False, _parents=(), _bwd=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> None:
        if self.data.shape != ():
            raise DimensionError("backward() requires a scalar loss")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._bwd is not None and node.grad is not None:
                node._bwd(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def _accumulate(parent: Tensor, g: np.ndarray) -> None:
    if not parent.requires_grad:
        return
    if parent.grad is None:
        parent.grad = g
    else:
        parent.grad = parent.grad + g


def _unary(x: Tensor, out_data: np.ndarray, grad_fn) -> Tensor:
    if not x.requires_grad:
        return Tensor(out_data)

    def bwd(g):
        _accumulate(x, grad_fn(g))

    return Tensor(out_data, True, (x,), bwd)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def constant(x, dtype=None) -> Tensor:
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def parameter(arr: np.ndarray) -> Tensor:
    return Tensor(arr, requires_grad=True)


# -- arithmetic -------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out)

    def bwd(g):
        _accumulate(a, _unbroadcast(g, a.data.shape))
        _accumulate(b, _unbroadcast(g, b.data.shape))

    return Tensor(out, True, (a, b), bwd)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return add(a, scale(b, -1.0))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out)

    def bwd(g):
        _accumulate(a, _unbroadcast(g * b.data, a.data.shape))
        _accumulate(b, _unbroadcast(g * a.data, b.data.shape))

    return Tensor(out, True, (a, b), bwd)


def scale(x: Tensor, c: float) -> Tensor:
    x = as_tensor(x)
    cc = x.data.dtype.type(c)
    return _unary(x, x.data * cc, lambda g: g * cc)


def cmul(x: Tensor, const: np.ndarray) -> Tensor:
    """Elementwise multiply by a non-differentiated constant array."""
    x = as_tensor(x)
    c = np.asarray(const, dtype=x.data.dtype)
    return _unary(x, x.data * c, lambda g: g * c)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# -- elementwise nonlinearities ---------------------------------------------


def relu(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    # out > 0 iff x > 0, so the mask can be rebuilt lazily from the output
    return _unary(x, out, lambda g: g * (out > 0))


def leaky_relu(x: Tensor, slope: float) -> Tensor:
    x = as_tensor(x)
    s = x.data.dtype.type(slope)
    out = np.where(x.data > 0, x.data, x.data * s)
    return _unary(x, out, lambda g: np.where(out > 0, g, g * s))


def sigmoid(x: Tensor) -> Tensor:
    x = as_tensor(x)
    d = x.data
    out = np.empty_like(d)
    pos = d >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _unary(x, out, lambda g: g * out * (1.0 - out))


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.data * x.data, lambda g: g * 2.0 * x.data)


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.sqrt(x.data)
    denom = np.maximum(out, np.finfo(out.dtype).tiny)
    return _unary(x, out, lambda g: g * 0.5 / denom)


def absolute(x: Tensor) -> Tensor:
    x = as_tensor(x)
    sign = np.sign(x.data)
    return _unary(x, np.abs(x.data), lambda g: g * sign)


def log_clamped(x: Tensor, floor: float = 1e-12) -> Tensor:
    """log(max(x, floor)); zero gradient inside the clamped region."""
    x = as_tensor(x)
    f = x.data.dtype.type(floor)
    clamped = np.maximum(x.data, f)
    mask = x.data >= f
    return _unary(x, np.log(clamped), lambda g: g * mask / clamped)


# -- reductions -------------------------------------------------------------


def sum_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum())
    return _unary(x, out, lambda g: np.full(x.data.shape, g, dtype=x.data.dtype))


def mean_all(x: Tensor) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = np.asarray(x.data.mean())
    return _unary(x, out, lambda g: np.full(x.data.shape, g / n, dtype=x.data.dtype))


def sum_axis(x: Tensor, axis: int) -> Tensor:
    x = as_tensor(x)
    out = x.data.sum(axis=axis)

    def grad_fn(g):
        return np.broadcast_to(np.expand_dims(g, axis), x.data.shape).copy()

    return _unary(x, out, grad_fn)


def mean_over_last3(x: Tensor) -> Tensor:
    """Per-sample mean over all but the batch axis: (N, ...) -> (N,)."""
    x = as_tensor(x)
    n = x.data.shape[0]
    k = x.data.size // max(n, 1)
    out = x.data.reshape(n, -1).mean(axis=1)

    def grad_fn(g):
        return np.broadcast_to(g.reshape((n,) + (1,) * (x.data.ndim - 1)), x.data.shape) / x.data.dtype.type(k)

    return _unary(x, out, grad_fn)


# -- shape ops ---------------------------------------------------------------


def reshape(x: Tensor, shape) -> Tensor:
    x = as_tensor(x)
    return _unary(x, x.data.reshape(shape), lambda g: g.reshape(x.data.shape))


def slice_rows(x: Tensor, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    out = x.data[start:stop]

    def grad_fn(g):
        full = np.zeros_like(x.data)
        full[start:stop] = g
        return full

    return _unary(x, out.copy(), grad_fn)


def concat_last(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = np.concatenate([a.data, b.data], axis=-1)
    if not (a.requires_grad or b.requires_grad):
        return Tensor(out)
    na = a.data.shape[-1]

    def bwd(g):
        _accumulate(a, np.ascontiguousarray(g[..., :na]))
        _accumulate(b, np.ascontiguousarray(g[..., na:]))

    return Tensor(out, True, (a, b), bwd)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, C), mean over the spatial grid."""
    x = as_tensor(x)
    n, h, w, c = x.data.shape
    out = x.data.mean(axis=(1, 2))

    def grad_fn(g):
        return np.broadcast_to(g[:, None, None, :], x.data.shape) / x.data.dtype.type(h * w)

    return _unary(x, out, grad_fn)


# -- linear layers ------------------------------------------------------------


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    out = x.data @ w.data + b.data
    if not (x.requires_grad or w.requires_grad or b.requires_grad):
        return Tensor(out)

    def bwd(g):
        _accumulate(x, g @ w.data.T)
        _accumulate(w, x.data.T @ g)
        _accumulate(b, g.sum(axis=0))

    return Tensor(out, True, (x, w, b), bwd)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 1) -> Tensor:
    """Channels-last convolution; bias optional."""
    x, w = as_tensor(x), as_tensor(w)
    if w.requires_grad:
        out, ctx = kernels.conv2d_forward_ex(x.data, w.data, stride, pad)
    else:
        out, ctx = kernels.conv2d_forward(x.data, w.data, stride, pad), None
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)
    if not any(p.requires_grad for p in parents):
        return Tensor(out)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, kernels.conv2d_backward_input(g, w.data, x.data.shape, stride, pad))
        if w.requires_grad:
            _accumulate(
                w, kernels.conv2d_backward_weight(g, x.data, w.data.shape, stride, pad, ctx)
            )
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 1, 2)))

    return Tensor(out, True, parents, bwd)


def conv2d_transpose(
    x: Tensor, w: Tensor, b: Tensor | None, out_hw: tuple[int, int], stride: int = 2, pad: int = 1
) -> Tensor:
    """Stride-``stride`` upsampling convolution (transposed conv).

    ``w`` uses the downsampling-conv layout ``(kh, kw, Cout, Cin)``; forward
    here is exactly the gradient-wrt-input of that conv, so the three shared
    kernels cover this op too.
    """
    x, w = as_tensor(x), as_tensor(w)
    n = x.data.shape[0]
    cout = w.data.shape[2]
    out_shape = (n, out_hw[0], out_hw[1], cout)
    out = kernels.conv2d_backward_input(x.data, w.data, out_shape, stride, pad)
    if b is not None:
        b = as_tensor(b)
        out = out + b.data
    parents = (x, w) if b is None else (x, w, b)
    if not any(p.requires_grad for p in parents):
        return Tensor(out)

    def bwd(g):
        if x.requires_grad:
            _accumulate(x, kernels.conv2d_forward(g, w.data, stride, pad))
        if w.requires_grad:
            _accumulate(w, kernels.conv2d_backward_weight(x.data, g, w.data.shape, stride, pad))
        if b is not None and b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 1, 2)))

    return Tensor(out, True, parents, bwd)
