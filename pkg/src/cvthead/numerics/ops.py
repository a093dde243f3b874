"""Differentiable primitives covering every neural stage of the pipeline.

Convolution uses the cross-correlation convention (no kernel flip) with
exact output-size division enforced. layer_norm uses population variance.
"""
from __future__ import annotations

from typing import Optional, Sequence, Union

import numpy as np
from scipy.special import erf

from ..errors import ConfigError, ShapeError
from .tensor import Tensor, apply_op, as_tensor, _check_same_dtype

Scalar = Union[int, float]

_INV_SQRT2 = 0.7071067811865476
_INV_SQRT2PI = 0.3989422804014327


def _coerce(a, b):
    """Promote python scalars to the other operand's dtype."""
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, Tensor(np.asarray(b, dtype=a.dtype), dtype=a.dtype)
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return Tensor(np.asarray(a, dtype=b.dtype), dtype=b.dtype), b
    return a, b


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum-reduce a gradient back to the shape it was broadcast from."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_same_dtype(a, b)
    out = a.data + b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return apply_op("add", (a, b), out, bwd)


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_same_dtype(a, b)
    out = a.data - b.data

    def bwd(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return apply_op("sub", (a, b), out, bwd)


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_same_dtype(a, b)
    out = a.data * b.data
    ad, bd = a.data, b.data

    def bwd(g):
        return _unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)

    return apply_op("mul", (a, b), out, bwd)


def div(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_same_dtype(a, b)
    out = a.data / b.data
    ad, bd = a.data, b.data

    def bwd(g):
        ga = g / bd
        gb = -g * ad / (bd * bd)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return apply_op("div", (a, b), out, bwd)


def neg(a: Tensor) -> Tensor:
    return apply_op("neg", (a,), -a.data, lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product: 2-d x 2-d, or batched 3-d x 3-d with equal batch."""
    _check_same_dtype(a, b)
    if a.ndim == b.ndim == 2:
        if a.shape[1] != b.shape[0]:
            raise ShapeError(f"matmul inner dims {a.shape} x {b.shape}")
    elif a.ndim == b.ndim == 3:
        if a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
            raise ShapeError(f"matmul batch dims {a.shape} x {b.shape}")
    else:
        raise ShapeError(f"matmul supports 2-d or batched 3-d, got {a.shape} x {b.shape}")
    out = a.data @ b.data
    ad, bd = a.data, b.data

    def bwd(g):
        bt = bd.swapaxes(-1, -2)
        at = ad.swapaxes(-1, -2)
        return g @ bt, at @ g

    return apply_op("matmul", (a, b), out, bwd)


def transpose(a: Tensor, axes: Optional[Sequence[int]] = None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    out = np.transpose(a.data, axes)

    def bwd(g):
        return (np.transpose(g, inv),)

    return apply_op("transpose", (a,), out, bwd)


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    out = a.data.reshape(shape)
    orig = a.shape

    def bwd(g):
        return (g.reshape(orig),)

    return apply_op("reshape", (a,), out, bwd)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    _check_same_dtype(*tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, splits, axis=axis))

    return apply_op("concat", tuple(tensors), out, bwd)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice [start, start+length) along one axis."""
    if start < 0 or start + length > a.shape[axis]:
        raise ShapeError(f"narrow [{start},{start + length}) out of range for axis {axis} of {a.shape}")
    index = [slice(None)] * a.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = a.data[index].copy()
    shape = a.shape

    def bwd(g):
        full = np.zeros(shape, dtype=g.dtype)
        full[index] = g
        return (full,)

    return apply_op("narrow", (a,), out, bwd)


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=a.dtype)
    shape = a.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).astype(g.dtype, copy=True),)
        g2 = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g2, shape).astype(g.dtype, copy=True),)

    return apply_op("sum", (a,), np.asarray(out, dtype=a.dtype), bwd)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    n = a.size if axis is None else a.shape[axis]
    total = sum_(a, axis=axis, keepdims=keepdims)
    return mul(total, 1.0 / n)


def log(a: Tensor) -> Tensor:
    out = np.log(a.data)
    ad = a.data

    def bwd(g):
        return (g / ad,)

    return apply_op("log", (a,), out, bwd)


def absval(a: Tensor) -> Tensor:
    out = np.abs(a.data)
    sign = np.sign(a.data)

    def bwd(g):
        return (g * sign,)

    return apply_op("abs", (a,), out, bwd)


_ACTIVATIONS = ("relu", "gelu", "tanh", "sigmoid")


def activation(a: Tensor, kind: str) -> Tensor:
    """Elementwise nonlinearity; gelu is the exact erf form."""
    if kind not in _ACTIVATIONS:
        raise ConfigError(f"unknown activation {kind!r}; expected one of {_ACTIVATIONS}")
    x = a.data
    if kind == "relu":
        out = np.maximum(x, 0)
        mask = (x > 0).astype(x.dtype)

        def bwd(g):
            return (g * mask,)

    elif kind == "gelu":
        cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
        out = (x * cdf).astype(x.dtype)
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        dcache = (cdf + x * pdf).astype(x.dtype)

        def bwd(g):
            return (g * dcache,)

    elif kind == "tanh":
        out = np.tanh(x)
        y = out

        def bwd(g):
            return (g * (1 - y * y),)

    else:  # sigmoid, split so exp never sees a positive argument
        pos = x >= 0
        ex = np.exp(np.where(pos, -x, x))
        out = np.where(pos, 1.0 / (1.0 + ex), ex / (1.0 + ex)).astype(x.dtype)
        y = out

        def bwd(g):
            return (g * y * (1 - y),)

    return apply_op(kind, (a,), out, bwd)


def relu(a: Tensor) -> Tensor:
    return activation(a, "relu")


def gelu(a: Tensor) -> Tensor:
    return activation(a, "gelu")


def tanh(a: Tensor) -> Tensor:
    return activation(a, "tanh")


def sigmoid(a: Tensor) -> Tensor:
    return activation(a, "sigmoid")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    if not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {a.shape}")
    x = a.data
    shifted = x - x.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    y = out

    def bwd(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return ((g - dot) * y,)

    return apply_op("softmax", (a,), out, bwd)


def layer_norm(a: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit population variance, then affine.

    Constant rows map to bias (the eps in the denominator makes the
    normalized value exactly zero).
    """
    _check_same_dtype(a, gain, bias)
    d = a.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm gain/bias must be ({d},)")
    x = a.data
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv
    out = xhat * gain.data + bias.data
    g_data = gain.data

    def bwd(g):
        gy = g * g_data
        m1 = gy.mean(axis=-1, keepdims=True)
        m2 = (gy * xhat).mean(axis=-1, keepdims=True)
        dx = (gy - m1 - xhat * m2) * inv
        red = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=red)
        dbias = g.sum(axis=red)
        return dx.astype(x.dtype), dgain.astype(x.dtype), dbias.astype(x.dtype)

    return apply_op("layer_norm", (a, gain, bias), out.astype(x.dtype), bwd)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(Cin, Hp, Wp) -> (Cin*kh*kw, ho*wo) tap matrix."""
    cin = xp.shape[0]
    cols = np.empty((cin, kh, kw, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(cin * kh * kw, ho * wo)


def conv2d(
    x: Tensor,
    w: Tensor,
    bias: Optional[Tensor] = None,
    stride: int = 1,
    padding: int = 0,
) -> Tensor:
    """2-d cross-correlation of (Cin,H,W) with (Cout,Cin,kh,kw).

    Output size (H + 2p - kh)/stride + 1 must divide exactly.
    """
    _check_same_dtype(x, w)
    if x.ndim != 3 or w.ndim != 4:
        raise ShapeError(f"conv2d expects (Cin,H,W) and (Cout,Cin,kh,kw), got {x.shape}, {w.shape}")
    cin, h, wd = x.shape
    cout, cin_w, kh, kw = w.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d channel mismatch: input {cin}, kernel {cin_w}")
    if stride < 1:
        raise ShapeError("conv2d stride must be >= 1")
    if h + 2 * padding < kh or wd + 2 * padding < kw:
        raise ShapeError("conv2d kernel larger than padded input")
    if (h + 2 * padding - kh) % stride or (wd + 2 * padding - kw) % stride:
        raise ShapeError(
            f"conv2d non-integral output size for input {h}x{wd}, kernel {kh}x{kw}, "
            f"stride {stride}, padding {padding}"
        )
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1

    if padding:
        xp = np.pad(x.data, ((0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = w.data.reshape(cout, cin * kh * kw)
    out = (wmat @ cols).reshape(cout, ho, wo)
    if bias is not None:
        _check_same_dtype(x, bias)
        if bias.shape != (cout,):
            raise ShapeError(f"conv2d bias must be ({cout},)")
        out = out + bias.data[:, None, None]

    w_shape = w.shape

    def bwd(g):
        gmat = g.reshape(cout, ho * wo)
        dw = (gmat @ cols.T).reshape(w_shape)
        dcols = (wmat.T @ gmat).reshape(cin, kh, kw, ho, wo)
        dxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[:, i, j]
        dx = dxp[:, padding : padding + h, padding : padding + wd] if padding else dxp
        db = gmat.sum(axis=1) if bias is not None else None
        return dx, dw, db

    return apply_op("conv2d", (x, w, bias), out, bwd)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbor 2x spatial upsampling of a (C,H,W) tensor."""
    if x.ndim != 3:
        raise ShapeError(f"upsample2x expects (C,H,W), got {x.shape}")
    c, h, w = x.shape
    out = np.repeat(np.repeat(x.data, 2, axis=1), 2, axis=2)

    def bwd(g):
        return (g.reshape(c, h, 2, w, 2).sum(axis=(2, 4)),)

    return apply_op("upsample2x", (x,), out, bwd)


__all__ = [
    "add", "sub", "mul", "div", "neg", "matmul", "transpose", "reshape",
    "concat", "narrow", "sum_", "mean", "absval", "log", "activation", "relu",
    "gelu", "tanh", "sigmoid", "softmax", "layer_norm", "conv2d",
    "upsample2x", "as_tensor", "apply_op", "Tensor",
]
