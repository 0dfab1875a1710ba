"""Differentiable operations on :class:`Tensor`.

Image tensors use the NCHW shape convention.  Convolution, pooling,
upsampling and channel concatenation produce arrays whose *memory* is laid
out channels-last (an NCHW-shaped view of an NHWC buffer), because the
per-tap matrix products are several times faster that way on CPU.  The
layout is invisible to callers: shapes and values are plain NCHW.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import Tensor


def _lift(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=like.dtype), dtype=like.dtype)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise arithmetic ---------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(g, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def back(g):
        return (_unbroadcast(g, a.shape) if a.requires_grad else None,
                _unbroadcast(-g, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data - b.data, (a, b), back)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def back(g):
        return (_unbroadcast(g * b.data, a.shape) if a.requires_grad else None,
                _unbroadcast(g * a.data, b.shape) if b.requires_grad else None)

    return Tensor._from_op(a.data * b.data, (a, b), back)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else _lift(a, b)
    b = _lift(b, a)

    def back(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._from_op(a.data / b.data, (a, b), back)


def abs(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    # sign() is 0 at 0, the subgradient used by the l1 loss
    return Tensor._from_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),))


def square(x: Tensor) -> Tensor:
    return Tensor._from_op(x.data * x.data, (x,), lambda g: (2 * g * x.data,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    return Tensor._from_op(np.log(x.data), (x,), lambda g: (g / x.data,))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * v))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * out * (1 - out),))


def softplus(x: Tensor) -> Tensor:
    """log(1 + e^x), evaluated without overflow for large |x|."""
    out = np.logaddexp(np.zeros((), dtype=x.dtype), x.data)
    return Tensor._from_op(out, (x,), lambda g: (g * _sigmoid(x.data),))


def leaky_relu(x: Tensor, leak: float = 0.2) -> Tensor:
    if not 0.0 <= leak <= 1.0:
        raise ValueError(f"leak must lie in [0, 1], got {leak}")
    leak_c = x.dtype.type(leak)
    out = np.maximum(x.data, leak_c * x.data)

    def back(g):
        slope = (x.data >= 0).astype(x.dtype)
        slope *= 1 - leak_c
        slope += leak_c
        return (g * slope,)

    return Tensor._from_op(out, (x,), back)


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


# -- reductions and shape ops ------------------------------------------------

def _norm_axes(axis, ndim) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    axes = _norm_axes(axis, x.ndim)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor._from_op(np.asarray(out, dtype=x.dtype), (x,), back)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    if count == 0:
        raise ValueError("mean over an empty axis")
    return mul(sum(x, axis=axes, keepdims=keepdims), 1.0 / count)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = x.data.reshape(tuple(shape))
    return Tensor._from_op(out, (x,), lambda g: (g.reshape(x.shape),))


def flatten(x: Tensor) -> Tensor:
    """Collapse all but the leading (batch) dimension."""
    return reshape(x, (x.shape[0], -1))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return Tensor._from_op(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    axis = axis % ndim
    sizes = [t.shape[axis] for t in tensors]
    if ndim == 4 and axis == 1:
        n, _, h, w = tensors[0].shape
        for t in tensors:
            if t.shape[0] != n or t.shape[2:] != (h, w):
                raise ValueError(f"concat shape mismatch: {[t.shape for t in tensors]}")
        buf = np.empty((n, h, w, int(np.sum(sizes))), dtype=tensors[0].dtype)
        start = 0
        for t, c in zip(tensors, sizes):
            buf[..., start:start + c] = t.data.transpose(0, 2, 3, 1)
            start += c
        out = buf.transpose(0, 3, 1, 2)
    else:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([0] + sizes)

    def back(g):
        index = [slice(None)] * ndim
        grads = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                grads.append(None)
                continue
            index[axis] = slice(lo, hi)
            grads.append(g[tuple(index)])
        return grads

    return Tensor._from_op(out, tensors, back)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy broadcasting over leading batch dims."""
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul inner dimensions disagree: {a.shape} @ {b.shape}")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._from_op(a.data @ b.data, (a, b), back)


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Affine map ``x @ weight + bias`` for x of shape N×F, weight F×G."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise ValueError(f"dense shape mismatch: input {x.shape}, weight {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ValueError(f"dense bias shape {bias.shape} != ({weight.shape[1]},)")
    out = matmul(x, weight)
    return add(out, bias) if bias is not None else out


# -- image ops ---------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of an NCHW batch with an OIHW kernel.

    Implemented as one matrix product per kernel tap over a zero-padded
    channels-last copy of the input; taps are accumulated in row-major
    (ky, kx) order so results are deterministic.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ValueError(f"conv2d expects NCHW input and OIHW kernel, got {x.shape} and {kernel.shape}")
    n, c, h, w = x.shape
    o, i, kh, kw = kernel.shape
    if c != i:
        raise ValueError(f"conv2d channel mismatch: input has {c} channels, kernel expects {i} "
                         f"(input {x.shape}, kernel {kernel.shape})")
    if bias is not None and bias.shape != (o,):
        raise ValueError(f"conv2d bias shape {bias.shape} != ({o},)")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride {stride} / padding {padding}")
    ho = conv_output_size(h, kh, stride, padding)
    wo = conv_output_size(w, kw, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d input {x.shape} too small for kernel {kernel.shape} "
                         f"with padding {padding}")

    dtype = x.dtype
    p, s = padding, stride
    xp = np.zeros((n, h + 2 * p, w + 2 * p, c), dtype=dtype)
    xp[:, p:p + h, p:p + w, :] = x.data.transpose(0, 2, 3, 1)
    taps = np.ascontiguousarray(kernel.data.transpose(2, 3, 1, 0))  # KH KW I O

    def window(ky, kx):
        return (slice(None), slice(ky, ky + s * (ho - 1) + 1, s),
                slice(kx, kx + s * (wo - 1) + 1, s), slice(None))

    out = np.zeros((n, ho, wo, o), dtype=dtype)
    for ky in range(kh):
        for kx in range(kw):
            out += xp[window(ky, kx)] @ taps[ky, kx]
    if bias is not None:
        out += bias.data

    def back(g):
        g = np.ascontiguousarray(g.transpose(0, 2, 3, 1))
        g2 = g.reshape(-1, o)
        gx = gk = gb = None
        if kernel.requires_grad:
            gt = np.empty((kh, kw, c, o), dtype=dtype)
            for ky in range(kh):
                for kx in range(kw):
                    cols = np.ascontiguousarray(xp[window(ky, kx)]).reshape(-1, c)
                    gt[ky, kx] = cols.T @ g2
            gk = np.ascontiguousarray(gt.transpose(3, 2, 0, 1))
        if x.requires_grad and s == 1 and o < c:
            # full correlation of the gradient with the flipped kernel, one GEMM
            gp = np.zeros((n, ho + 2 * (kh - 1), wo + 2 * (kw - 1), o), dtype=dtype)
            gp[:, kh - 1:kh - 1 + ho, kw - 1:kw - 1 + wo] = g
            cols = sliding_window_view(gp, (kh, kw), axis=(1, 2))
            flipped = taps[::-1, ::-1].transpose(3, 0, 1, 2).reshape(o * kh * kw, c)
            gxp = (cols.reshape(-1, o * kh * kw) @ flipped).reshape(xp.shape)
            gx = gxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
        elif x.requires_grad:
            gxp = np.zeros_like(xp)
            for ky in range(kh):
                for kx in range(kw):
                    gxp[window(ky, kx)] += g @ taps[ky, kx].T
            gx = gxp[:, p:p + h, p:p + w, :].transpose(0, 3, 1, 2)
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gk, gb

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return Tensor._from_op(out.transpose(0, 3, 1, 2), parents, back)


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Replicate every pixel into a factor×factor block."""
    if factor < 1:
        raise ValueError(f"upsample factor must be >= 1, got {factor}")
    n, c, h, w = x.shape
    f = factor
    src = x.data.transpose(0, 2, 3, 1)
    out = np.broadcast_to(src[:, :, None, :, None, :], (n, h, f, w, f, c)).reshape(n, h * f, w * f, c)

    def back(g):
        g = g.transpose(0, 2, 3, 1).reshape(n, h, f, w, f, c).sum(axis=(2, 4))
        return (g.transpose(0, 3, 1, 2),)

    return Tensor._from_op(out.transpose(0, 3, 1, 2), (x,), back)


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling (window == stride); trailing rows/cols dropped.

    Ties route the gradient to the first maximal element in row-major order.
    """
    n, c, h, w = x.shape
    k = size
    ho, wo = h // k, w // k
    if ho < 1 or wo < 1:
        raise ValueError(f"max_pool2d input {x.shape} smaller than window {k}")
    src = x.data.transpose(0, 2, 3, 1)[:, :ho * k, :wo * k, :]
    win = src.reshape(n, ho, k, wo, k, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, ho, wo, c, k * k)
    idx = np.argmax(win, axis=-1)[..., None]
    out = np.take_along_axis(win, idx, axis=-1)[..., 0]

    def back(g):
        gw = np.zeros(win.shape, dtype=x.dtype)
        np.put_along_axis(gw, idx, g.transpose(0, 2, 3, 1)[..., None], axis=-1)
        gw = gw.reshape(n, ho, wo, c, k, k).transpose(0, 1, 4, 2, 5, 3).reshape(n, ho * k, wo * k, c)
        gx = np.zeros((n, h, w, c), dtype=x.dtype)
        gx[:, :ho * k, :wo * k, :] = gw
        return (gx.transpose(0, 3, 1, 2),)

    return Tensor._from_op(out.transpose(0, 3, 1, 2), (x,), back)
