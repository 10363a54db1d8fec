"""Differentiable operations over :class:`Tensor`.

Each function computes its forward value with numpy and registers a closure
for the vector-Jacobian product.  Composite ops (attention, swish, ...) are
written in terms of the primitives so they need no backward of their own.
"""

from __future__ import annotations

import math
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .tensor import Tensor, as_tensor, make_result


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _pair(a, b) -> tuple:
    # constants adopt the dtype of the tensor operand
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(b, dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(a, dtype=b.dtype), b
    return as_tensor(a), as_tensor(b)


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ValueError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "add")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "sub")

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "mul")

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _check_broadcast(a, b, "div")
    out = a.data / b.data

    def bw(g):
        ga = _unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "div")


def neg(x: Tensor) -> Tensor:
    return make_result(-x.data, (x,), lambda g: (-g,), "neg")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return make_result(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.log(x.data)
    return make_result(out, (x,), lambda g: (g / x.data,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return make_result(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def power(x: Tensor, p: float) -> Tensor:
    return make_result(x.data ** p, (x,), lambda g: (g * p * x.data ** (p - 1),), "pow")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = out.astype(d.dtype, copy=False)
    return make_result(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return make_result(x.data * mask, (x,), lambda g: (g * mask,), "relu")


def abs_(x: Tensor) -> Tensor:
    return make_result(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


def sin(x: Tensor) -> Tensor:
    return make_result(np.sin(x.data), (x,), lambda g: (g * np.cos(x.data),), "sin")


def cos(x: Tensor) -> Tensor:
    return make_result(np.cos(x.data), (x,), lambda g: (-g * np.sin(x.data),), "cos")


def clamp(x: Tensor, lo: Optional[float] = None, hi: Optional[float] = None) -> Tensor:
    out = np.clip(x.data, lo, hi)
    keep = np.ones(x.shape, dtype=bool)
    if lo is not None:
        keep &= x.data >= lo
    if hi is not None:
        keep &= x.data <= hi
    return make_result(out, (x,), lambda g: (g * keep,), "clamp")


def swish(x: Tensor) -> Tensor:
    return mul(x, sigmoid(x))


def glu(x: Tensor, axis: int) -> Tensor:
    """Gated linear unit: first half times sigmoid of the second half along ``axis``."""
    n = x.shape[axis]
    if n % 2:
        raise ValueError(f"glu needs an even size along axis {axis}, got {n}")
    a, b = split(x, 2, axis)
    return mul(a, sigmoid(b))


# ----------------------------------------------------------------- reductions


def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ValueError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(out)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), bw, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axis(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    out = x.data.mean(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g / count, x.shape).copy(),)

    return make_result(np.asarray(out), (x,), bw, "mean")


# ---------------------------------------------------------------------- shape


def reshape(x: Tensor, shape) -> Tensor:
    out = x.data.reshape(shape)
    return make_result(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return make_result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inverse),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return transpose(x, axes)


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, slice, type(None), type(Ellipsis))) for i in items)


def getitem(x: Tensor, idx) -> Tensor:
    if isinstance(idx, Tensor):
        idx = idx.data
    out = np.array(x.data[idx])
    basic = _is_basic_index(idx)

    def bw(g):
        gx = np.zeros_like(x.data)
        if basic:
            gx[idx] = g
        else:
            np.add.at(gx, idx, g)
        return (gx,)

    return make_result(out, (x,), bw, "getitem")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ValueError("concat of an empty sequence")
    ndim = tensors[0].ndim
    axis = _norm_axis(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != axis):
            raise ValueError(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        bounds = np.cumsum(sizes)[:-1]
        return tuple(np.split(g, bounds, axis=axis))

    return make_result(out, tuple(tensors), bw, "concat")


def split(x: Tensor, parts: int, axis: int) -> list:
    n = x.shape[axis]
    step = n // parts
    index = [slice(None)] * x.ndim
    out = []
    for i in range(parts):
        index[axis] = slice(i * step, (i + 1) * step)
        out.append(getitem(x, tuple(index)))
    return out


def broadcast_to(x: Tensor, shape) -> Tensor:
    out = np.broadcast_to(x.data, shape).copy()
    return make_result(out, (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def pad_time(x: Tensor, left: int, right: int) -> Tensor:
    """Zero-pad the last axis."""
    widths = [(0, 0)] * (x.ndim - 1) + [(left, right)]
    out = np.pad(x.data, widths)
    n = x.shape[-1]
    return make_result(out, (x,), lambda g: (np.ascontiguousarray(g[..., left:left + n]),), "pad")


# --------------------------------------------------------------------- linear


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ: {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), bw, "matmul")


def embedding_lookup(weight: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embedding id out of range [0, {weight.shape[0]})")
    out = weight.data[ids]

    def bw(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids, g)
        return (gw,)

    return make_result(out, (weight,), bw, "embedding")


# ------------------------------------------------------------ normalisations


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (x,), bw, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def bw(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (x,), bw, "log_softmax")


def layer_norm(x: Tensor, gamma: Optional[Tensor] = None, beta: Optional[Tensor] = None,
               eps: float = 1e-5) -> Tensor:
    """Normalise over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat
    if gamma is not None:
        if gamma.shape != (d,):
            raise ValueError(f"layer_norm gamma shape {gamma.shape} != ({d},)")
        out = out * gamma.data
    if beta is not None:
        out = out + beta.data
    parents = tuple(t for t in (x, gamma, beta) if t is not None)

    def bw(g):
        gxhat = g * gamma.data if gamma is not None else g
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        grads = [gx]
        lead = tuple(range(x.ndim - 1))
        if gamma is not None:
            grads.append((g * xhat).sum(axis=lead))
        if beta is not None:
            grads.append(g.sum(axis=lead))
        return tuple(grads)

    return make_result(out, parents, bw, "layer_norm")


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    """Scale to unit L2 norm along ``axis``; rows with norm below ``eps`` map to zero."""
    norm = np.sqrt((x.data * x.data).sum(axis=axis, keepdims=True))
    live = norm >= eps
    safe = np.where(live, norm, 1.0)
    out = np.where(live, x.data / safe, 0.0).astype(x.dtype, copy=False)

    def bw(g):
        gx = (g - out * (g * out).sum(axis=axis, keepdims=True)) / safe
        return (np.where(live, gx, 0.0).astype(x.dtype, copy=False),)

    return make_result(out, (x,), bw, "l2_normalize")


def masked_fill(x: Tensor, mask, value: float) -> Tensor:
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    out = np.where(mask, x.dtype.type(value), x.data)
    return make_result(out, (x,), lambda g: (np.where(mask, 0.0, g).astype(g.dtype, copy=False),), "masked_fill")


def dropout(x: Tensor, p: float, rng: np.random.Generator, training: bool) -> Tensor:
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    keep = keep.astype(x.dtype)
    return make_result(x.data * keep, (x,), lambda g: (g * keep,), "dropout")


# ---------------------------------------------------------------- convolution


def _frames(xp: np.ndarray, kernel: int, stride: int, dilation: int, t_out: int) -> np.ndarray:
    b, c, _ = xp.shape
    sb, sc, st = xp.strides
    return as_strided(xp, shape=(b, c, kernel, t_out), strides=(sb, sc, dilation * st, stride * st),
                      writeable=False)


def conv1d_output_length(t: int, kernel: int, stride: int = 1, padding: int = 0, dilation: int = 1) -> int:
    return (t + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def conv1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """1-D cross-correlation over ``[batch, channels, time]`` inputs.

    ``weight`` has shape ``[out_channels, in_channels // groups, kernel]``.
    """
    if x.ndim != 3:
        raise ValueError(f"conv1d input must be [batch, channels, time], got {x.shape}")
    b, c_in, t = x.shape
    c_out, c_in_g, k = weight.shape
    if c_in % groups or c_out % groups or c_in // groups != c_in_g:
        raise ValueError(f"conv1d: weight {weight.shape} incompatible with {c_in} input channels, groups={groups}")
    t_out = conv1d_output_length(t, k, stride, padding, dilation)
    if t_out < 1:
        raise ValueError(f"conv1d: input length {t} too short for kernel {k} dilation {dilation}")
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding))) if padding else x.data
    xp = np.ascontiguousarray(xp)
    cols = _frames(xp, k, stride, dilation, t_out)
    cols = cols.reshape(b, groups, c_in_g * k, t_out)
    w2 = weight.data.reshape(groups, c_out // groups, c_in_g * k)
    out = np.matmul(w2[None], cols).reshape(b, c_out, t_out)
    if bias is not None:
        out = out + bias.data[None, :, None]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g4 = g.reshape(b, groups, c_out // groups, t_out)
        gx = gw = None
        if weight.requires_grad:
            gw = np.matmul(g4, np.swapaxes(cols, -1, -2)).sum(axis=0).reshape(weight.shape)
        if x.requires_grad:
            gcols = np.matmul(np.swapaxes(w2, -1, -2)[None], g4).reshape(b, c_in, k, t_out)
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            span = stride * (t_out - 1) + 1
            for j in range(k):
                gxp[:, :, j * dilation:j * dilation + span:stride] += gcols[:, :, j, :]
            gx = gxp[:, :, padding:padding + t]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return make_result(out, parents, bw, "conv1d")


def conv_transpose1d_output_length(t: int, kernel: int, stride: int, padding: int = 0) -> int:
    return (t - 1) * stride + kernel - 2 * padding


def conv_transpose1d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
                     padding: int = 0) -> Tensor:
    """Transposed 1-D convolution; ``weight`` is ``[in_channels, out_channels, kernel]``."""
    if x.ndim != 3:
        raise ValueError(f"conv_transpose1d input must be [batch, channels, time], got {x.shape}")
    b, c_in, t = x.shape
    w_in, c_out, k = weight.shape
    if w_in != c_in:
        raise ValueError(f"conv_transpose1d: weight {weight.shape} expects {w_in} input channels, got {c_in}")
    full = (t - 1) * stride + k
    t_out = full - 2 * padding
    if t_out < 1:
        raise ValueError("conv_transpose1d: padding removes the whole output")
    w2 = weight.data.reshape(c_in, c_out * k)
    y = np.matmul(w2.T[None], x.data).reshape(b, c_out, k, t)
    out_full = np.zeros((b, c_out, full), dtype=x.dtype)
    span = stride * (t - 1) + 1
    for j in range(k):
        out_full[:, :, j:j + span:stride] += y[:, :, j, :]
    out = out_full[:, :, padding:padding + t_out]
    if bias is not None:
        out = out + bias.data[None, :, None]
    out = np.ascontiguousarray(out)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bw(g):
        g_full = np.zeros((b, c_out, full), dtype=g.dtype)
        g_full[:, :, padding:padding + t_out] = g
        gy = _frames(g_full, k, stride, 1, t).reshape(b, c_out * k, t)
        gx = np.matmul(w2[None], gy) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.matmul(x.data, np.swapaxes(gy, -1, -2)).sum(axis=0).reshape(weight.shape)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2)))
        return tuple(grads)

    return make_result(out, parents, bw, "conv_transpose1d")


# ------------------------------------------------------------------ attention


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """softmax(q kᵀ / sqrt(d)) v over the last two axes.

    ``mask`` is boolean and broadcastable to the score matrix; False entries
    are excluded.  Every query must keep at least one key.
    """
    d = q.shape[-1]
    scores = mul(matmul(q, swapaxes(k, -1, -2)), 1.0 / math.sqrt(d))
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if not np.all(np.broadcast_to(mask, scores.shape).any(axis=-1)):
            raise ValueError("attention mask leaves a query with no visible key")
        scores = masked_fill(scores, ~mask, -1e9)
    return matmul(softmax(scores, axis=-1), v)


# ------------------------------------------------------------ operator sugar


def _rsub(a, b):
    return sub(b, a)


def _rdiv(a, b):
    return div(b, a)


Tensor.__add__ = add
Tensor.__radd__ = add
Tensor.__sub__ = sub
Tensor.__rsub__ = _rsub
Tensor.__mul__ = mul
Tensor.__rmul__ = mul
Tensor.__truediv__ = div
Tensor.__rtruediv__ = _rdiv
Tensor.__neg__ = neg
Tensor.__matmul__ = matmul
Tensor.__getitem__ = getitem
Tensor.__pow__ = power
Tensor.sum = sum_
Tensor.mean = mean
Tensor.reshape = lambda self, *shape: reshape(self, shape[0] if len(shape) == 1 else shape)
Tensor.transpose = transpose
Tensor.relu = relu
Tensor.exp = exp
Tensor.log = log
