"""Differentiable operations on :class:`~dwp.autodiff.tensor.Tensor`.

Convolutions use an explicit im2col + matmul formulation. Kernel layout
follows the usual ``(out_channels, in_channels, kh, kw)`` convention for
``conv2d`` and ``(in_channels, out_channels, kh, kw)`` for
``conv_transpose2d``.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError, Tensor, make_node

LOG_2PI = float(np.log(2.0 * np.pi))


def _t(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if like is not None:
        return Tensor(np.asarray(x, dtype=like.dtype))
    return Tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    ndiff = grad.ndim - len(shape)
    if ndiff > 0:
        grad = grad.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _check_broadcast(op: str, a: Tensor, b: Tensor) -> tuple:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise arithmetic ------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("add", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_node("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("sub", a, b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_node("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("mul", a, b)

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node("mul", a.data * b.data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast("div", a, b)
    out = a.data / b.data

    def backward(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_node("div", out, (a, b), backward)


def neg(a: Tensor) -> Tensor:
    return make_node("neg", -a.data, (a,), lambda g: (-g,))


def power(a: Tensor, p: float) -> Tensor:
    p = float(p)

    def backward(g):
        return (g * p * a.data ** (p - 1.0),)

    return make_node("pow", a.data ** p, (a,), backward)


def square(a: Tensor) -> Tensor:
    return make_node("square", a.data * a.data, (a,), lambda g: (2.0 * g * a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return make_node("sqrt", out, (a,), lambda g: (g * 0.5 / out,))


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    elif isinstance(b, Tensor) and not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    elif not isinstance(a, Tensor):
        a, b = Tensor(a), Tensor(b)
    return a, b


# -- unary nonlinearities --------------------------------------------------

def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_node("exp", out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_node("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def softplus(a: Tensor) -> Tensor:
    x = a.data
    out = np.logaddexp(0.0, x).astype(x.dtype, copy=False)

    def backward(g):
        return (g / (1.0 + np.exp(-x)),)

    return make_node("softplus", out, (a,), backward)


def sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))), np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = out.astype(x.dtype, copy=False)
    return make_node("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    x = a.data
    pos = x > 0
    out = np.where(pos, x, slope * x).astype(x.dtype, copy=False)

    def backward(g):
        return (np.where(pos, g, slope * g),)

    return make_node("leaky_relu", out, (a,), backward)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    x = a.data
    pos = x > 0
    neg_part = alpha * np.expm1(np.minimum(x, 0.0))
    out = np.where(pos, x, neg_part).astype(x.dtype, copy=False)

    def backward(g):
        return (np.where(pos, g, g * (neg_part + alpha)),)

    return make_node("elu", out, (a,), backward)


def clamp(a: Tensor, lo: float | None = None, hi: float | None = None) -> Tensor:
    """Clip values; the gradient is zero where clipping is active."""
    x = a.data
    out = np.clip(x, lo, hi)
    inside = np.ones(x.shape, dtype=bool)
    if lo is not None:
        inside &= x >= lo
    if hi is not None:
        inside &= x <= hi

    return make_node("clamp", out, (a,), lambda g: (g * inside,))


# -- reductions and shape ----------------------------------------------------

def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_node("sum", np.asarray(out, dtype=a.dtype), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return make_node("reshape", out, (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    inv = None if axes is None else np.argsort(axes)
    return make_node("transpose", out, (a,), lambda g: (np.transpose(g, inv),))


def index(a: Tensor, idx) -> Tensor:
    out = a.data[idx]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, idx, g)
        return (full,)

    return make_node("index", np.array(out, copy=True), (a,), backward)


def concat(tensors: list[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.shape[axis] for t in tensors]
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError("concat", *[t.shape for t in tensors]) from None
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(tensors)))

    return make_node("concat", out, tuple(tensors), backward)


# -- linear algebra ------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_node("matmul", a.data @ b.data, (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with weight stored as ``(out, in)``."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError("linear", x.shape, weight.shape)
    out = x.data @ weight.data.T
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError("linear", weight.shape, bias.shape, detail="bias")
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    return make_node("linear", out, parents, backward)


# -- convolution ---------------------------------------------------------------

def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int):
    n, c, h, w = x.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    return cols, ho, wo


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, padding: int, ho: int, wo: int) -> np.ndarray:
    """Scatter-add columns laid out as ``(N, ho, wo, kh, kw, C)`` back to an image."""
    n, c, h, w = shape
    cols = cols.reshape(n, ho, wo, kh, kw, c)
    out = np.zeros((n, h + 2 * padding, w + 2 * padding, c), dtype=cols.dtype)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + hspan:stride, j:j + wspan:stride, :] += cols[:, :, :, i, j, :]
    if padding:
        out = out[:, padding:-padding, padding:-padding, :]
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv_forward(x: np.ndarray, w: np.ndarray, stride: int, padding: int):
    o, _, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = cols @ w.reshape(o, -1).T
    out = out.reshape(x.shape[0], ho, wo, o).transpose(0, 3, 1, 2)
    return np.ascontiguousarray(out), cols


def _conv_grad_input(g: np.ndarray, w: np.ndarray, x_shape: tuple, stride: int, padding: int) -> np.ndarray:
    o, c, kh, kw = w.shape
    n, _, ho, wo = g.shape
    g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
    gcols = g2 @ w.transpose(0, 2, 3, 1).reshape(o, -1)
    return _col2im(gcols, x_shape, kh, kw, stride, padding, ho, wo)


def _conv_grad_weight(g: np.ndarray, cols: np.ndarray, w_shape: tuple) -> np.ndarray:
    o = w_shape[0]
    g2 = g.transpose(0, 2, 3, 1).reshape(-1, o)
    return (g2.T @ cols).reshape(w_shape)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation of ``x (N,C,H,W)`` with ``weight (O,C,kh,kw)``."""
    if stride < 1 or padding < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv2d", x.shape, weight.shape)
    kh, kw = weight.shape[2:]
    if x.shape[2] + 2 * padding < kh or x.shape[3] + 2 * padding < kw:
        raise ShapeError("conv2d", x.shape, weight.shape, detail="kernel larger than padded input")
    out, cols = _conv_forward(x.data, weight.data, stride, padding)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError("conv2d", weight.shape, bias.shape, detail="bias")
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = _conv_grad_input(g, weight.data, x.shape, stride, padding) if x.requires_grad else None
        gw = _conv_grad_weight(g, cols, weight.shape) if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_node("conv2d", out, parents, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` has shape ``(C_in, C_out, kh, kw)``.

    This is exactly the input-adjoint of :func:`conv2d` with the same
    weight, so ``<conv2d(u, w), y> == <u, conv_transpose2d(y, w)>``.
    """
    if stride < 1 or padding < 0:
        raise ValueError(f"conv_transpose2d: stride must be >= 1 and padding >= 0, got {stride}, {padding}")
    if x.ndim != 4 or weight.ndim != 4 or x.shape[1] != weight.shape[0]:
        raise ShapeError("conv_transpose2d", x.shape, weight.shape)
    n, _, h, w = x.shape
    kh, kw = weight.shape[2:]
    ho = (h - 1) * stride - 2 * padding + kh
    wo = (w - 1) * stride - 2 * padding + kw
    if ho < 1 or wo < 1:
        raise ShapeError("conv_transpose2d", x.shape, weight.shape, detail="empty output")
    out_shape = (n, weight.shape[1], ho, wo)
    out = _conv_grad_input(x.data, weight.data, out_shape, stride, padding)
    if bias is not None:
        if bias.shape != (weight.shape[1],):
            raise ShapeError("conv_transpose2d", weight.shape, bias.shape, detail="bias")
        out += bias.data[None, :, None, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        gx = gw = None
        cols = None
        if x.requires_grad or weight.requires_grad:
            gx, cols = _conv_forward(g, weight.data, stride, padding)
        if weight.requires_grad:
            gw = _conv_grad_weight(x.data, cols, weight.shape)
        if not x.requires_grad:
            gx = None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=(0, 2, 3))

    return make_node("conv_transpose2d", out, parents, backward)


def max_pool2d(x: Tensor, kernel: int = 2, stride: int = 2) -> Tensor:
    """Non-overlapping max pooling (``kernel == stride``), floor mode.

    The gradient is routed to the first argmax in each window.
    """
    if kernel != stride:
        raise ValueError("max_pool2d: only kernel == stride is supported")
    if x.ndim != 4:
        raise ShapeError("max_pool2d", x.shape)
    n, c, h, w = x.shape
    ho, wo = h // kernel, w // kernel
    if ho == 0 or wo == 0:
        raise ShapeError("max_pool2d", x.shape, detail="input smaller than window")
    xc = x.data[:, :, :ho * kernel, :wo * kernel]
    blocks = xc.reshape(n, c, ho, kernel, wo, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho, wo, kernel * kernel)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, c, ho, wo, kernel, kernel).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, ho * kernel, wo * kernel)
        if ho * kernel == h and wo * kernel == w:
            return (gb,)
        full = np.zeros(x.shape, dtype=g.dtype)
        full[:, :, :ho * kernel, :wo * kernel] = gb
        return (full,)

    return make_node("max_pool2d", out, (x,), backward)


# -- losses ----------------------------------------------------------------------

def logsumexp(a: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    s = np.exp(x - m)
    tot = s.sum(axis=axis, keepdims=True)
    out = m + np.log(tot)
    soft = s / tot
    if not keepdims:
        out = np.squeeze(out, axis=axis)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * soft,)

    return make_node("logsumexp", out, (a,), backward)


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    m = np.max(x, axis=axis, keepdims=True)
    shifted = x - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_node("log_softmax", out, (a,), backward)


def nll_loss(logp: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Negative log-likelihood of integer ``labels`` under row log-probabilities."""
    labels = np.asarray(labels, dtype=np.int64)
    if logp.ndim != 2 or labels.shape != (logp.shape[0],):
        raise ShapeError("nll_loss", logp.shape, labels.shape)
    rows = np.arange(len(labels))
    picked = -logp.data[rows, labels]
    if reduction == "mean":
        out, scale = picked.mean(), 1.0 / len(labels)
    elif reduction == "sum":
        out, scale = picked.sum(), 1.0
    else:
        raise ValueError(f"unknown reduction {reduction!r}")

    def backward(g):
        full = np.zeros_like(logp.data)
        full[rows, labels] = -g * scale
        return (full,)

    return make_node("nll_loss", np.asarray(out, dtype=logp.dtype), (logp,), backward)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    return nll_loss(log_softmax(logits, axis=1), labels, reduction=reduction)


def gaussian_log_prob(x, mu, logvar) -> Tensor:
    """Elementwise ``log N(x | mu, exp(logvar))``."""
    x = _t(x)
    mu, logvar = _t(mu, like=x), _t(logvar, like=x)
    diff = x - mu
    return -0.5 * (LOG_2PI + logvar + square(diff) * exp(-logvar))


def softmax_np(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)
