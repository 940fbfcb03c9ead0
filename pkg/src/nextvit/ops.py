"""Layer primitives: grouped convolution, pooling, normalisation, activations, linear.

All functions are differentiable on a :class:`~nextvit.tensor.Tape`.  Parameter
arrays may be plain numpy arrays (constants) or taped tensors; they are cast to
the activation precision on the fly.
"""
from __future__ import annotations

import contextvars
import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Literal, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GroupMismatch, ShapeMismatch
from .tensor import Tensor, _record, as_tensor

Array = Union[Tensor, np.ndarray]
ConvMethod = Literal["im2col", "direct"]

DEFAULT_CONV_METHOD: ConvMethod = "direct"
_conv_method: contextvars.ContextVar[ConvMethod] = contextvars.ContextVar("conv_method", default=DEFAULT_CONV_METHOD)
# Upper bound on one im2col buffer; larger batches are processed in chunks.
IM2COL_CHUNK_BYTES = 64 << 20


@contextmanager
def conv_method(method: ConvMethod):
    """Select the conv2d forward strategy for code run inside the block."""
    if method not in ("direct", "im2col"):
        raise ValueError(f"unknown conv method {method!r}")
    token = _conv_method.set(method)
    try:
        yield
    finally:
        _conv_method.reset(token)


@dataclass(frozen=True)
class ConvParams:
    weight: Array
    bias: Array | None = None
    stride: int = 1
    padding: int = 0
    groups: int = 1


@dataclass(frozen=True)
class BatchNormParams:
    gamma: Array
    beta: Array
    running_mean: Array
    running_var: Array
    eps: float = 1e-5


@dataclass(frozen=True)
class LayerNormParams:
    gamma: Array
    beta: Array
    eps: float = 1e-5


@dataclass(frozen=True)
class LinearParams:
    weight: Array
    bias: Array | None = None


def _param(p, dtype) -> Tensor | None:
    if p is None:
        return None
    return as_tensor(p, dtype)


def _rank4(x: Tensor, op: str):
    if x.ndim != 4:
        raise ShapeMismatch(f"{op} expects (n, c, h, w), got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _tap(xp, i, j, stride, ho, wo):
    return xp[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride]


def _conv_direct(xp, wg, stride, ho, wo):
    # Accumulate one kernel tap at a time: out += W[:, :, :, i, j] @ shifted(x).
    n, c = xp.shape[:2]
    groups, og, cg, kh, kw = wg.shape
    taps = np.ascontiguousarray(wg.transpose(3, 4, 0, 1, 2))
    out = np.zeros((n, groups, og, ho * wo), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            xs = np.ascontiguousarray(_tap(xp, i, j, stride, ho, wo)).reshape(n, groups, cg, ho * wo)
            out += taps[i, j] @ xs
    return out


def _conv_im2col(xp, wg, stride, ho, wo):
    n = xp.shape[0]
    groups, og, cg, kh, kw = wg.shape
    wmat = wg.reshape(groups, og, cg * kh * kw)
    per_sample = cg * groups * kh * kw * ho * wo * xp.itemsize
    chunk = max(1, IM2COL_CHUNK_BYTES // max(per_sample, 1))
    out = np.empty((n, groups, og, ho * wo), dtype=xp.dtype)
    for s in range(0, n, chunk):
        part = xp[s : s + chunk]
        m = part.shape[0]
        win = sliding_window_view(part, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        cols = win.reshape(m, groups, cg, ho, wo, kh, kw).transpose(0, 1, 2, 5, 6, 3, 4)
        cols = cols.reshape(m, groups, cg * kh * kw, ho * wo)
        out[s : s + m] = wmat @ np.ascontiguousarray(cols)
    return out


def conv2d(x, p: ConvParams, method: ConvMethod | None = None) -> Tensor:
    """Grouped 2-D cross-correlation with zero padding.

    ``method`` selects the forward strategy: ``"direct"`` accumulates one
    kernel tap at a time, ``"im2col"`` unfolds patches into a matrix and does a
    single batched product.  Both give the same result to float tolerance.
    """
    x = as_tensor(x)
    _rank4(x, "conv2d")
    w = _param(p.weight, x.dtype)
    b = _param(p.bias, x.dtype)
    if w.ndim != 4:
        raise ShapeMismatch(f"conv weight must be rank 4, got {w.shape}")
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    groups, stride, pad = p.groups, p.stride, p.padding
    if groups < 1 or c % groups or cout % groups:
        raise GroupMismatch(f"channels in={c} out={cout} not divisible by groups={groups}")
    if cg * groups != c:
        raise ShapeMismatch(f"input has {c} channels, weight expects {cg * groups}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ShapeMismatch(f"kernel {kh}x{kw} exceeds padded input {h + 2 * pad}x{wd + 2 * pad}")
    if b is not None and b.shape != (cout,):
        raise ShapeMismatch(f"bias shape {b.shape} != ({cout},)")
    ho, wo = conv_output_size(h, kh, stride, pad), conv_output_size(wd, kw, stride, pad)
    og = cout // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    wg = w.data.reshape(groups, og, cg, kh, kw)
    if kh == kw == 1 and stride == 1:
        out = np.ascontiguousarray(wg[:, :, :, 0, 0]) @ xp.reshape(n, groups, cg, h * wd)
    elif (method or _conv_method.get()) == "im2col":
        out = _conv_im2col(xp, wg, stride, ho, wo)
    else:
        out = _conv_direct(xp, wg, stride, ho, wo)
    out = out.reshape(n, cout, ho, wo)
    if b is not None:
        out += b.data[None, :, None, None]

    def vjp(g):
        gg = np.ascontiguousarray(g).reshape(n, groups, og, ho * wo)
        gw = np.empty_like(wg)
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                xs = np.ascontiguousarray(_tap(xp, i, j, stride, ho, wo)).reshape(n, groups, cg, ho * wo)
                gw[:, :, :, i, j] = (gg @ np.swapaxes(xs, -1, -2)).sum(axis=0)
                gx_tap = np.ascontiguousarray(np.swapaxes(wg[:, :, :, i, j], -1, -2)) @ gg
                _tap(gxp, i, j, stride, ho, wo)[...] += gx_tap.reshape(n, c, ho, wo)
        gx = gxp[:, :, pad : pad + h, pad : pad + wd] if pad else gxp
        gb = g.sum(axis=(0, 2, 3)) if b is not None else None
        return (np.ascontiguousarray(gx), gw.reshape(w.shape), gb)

    return _record("conv2d", (x, w, b), out, vjp)


# --------------------------------------------------------------------------
# pooling


def pool_output_size(size: int, k: int, stride: int, ceil_mode: bool) -> int:
    if not ceil_mode:
        return (size - k) // stride + 1
    if size <= k:
        return 1
    out = -(-(size - k) // stride) + 1
    if (out - 1) * stride >= size:
        out -= 1
    return out


def avg_pool2d(x, k: int, stride: int, ceil_mode: bool = False) -> Tensor:
    """Window mean.  With ``ceil_mode`` trailing partial windows are kept and
    averaged over their valid elements only (used by attention key pooling)."""
    x = as_tensor(x)
    _rank4(x, "avg_pool2d")
    n, c, h, w = x.shape
    if k < 1 or stride < 1:
        raise ShapeMismatch("pool window and stride must be positive")
    if not ceil_mode and (h < k or w < k):
        raise ShapeMismatch(f"pool window {k} exceeds input {h}x{w}")
    ho, wo = pool_output_size(h, k, stride, ceil_mode), pool_output_size(w, k, stride, ceil_mode)

    if k == stride and h == ho * k and w == wo * k:
        out = x.data.reshape(n, c, ho, k, wo, k).mean(axis=(3, 5))
        inv = x.dtype.type(1.0 / (k * k))

        def vjp(g):
            gx = np.broadcast_to((g * inv)[:, :, :, None, :, None], (n, c, ho, k, wo, k))
            return (gx.reshape(n, c, h, w).copy(),)

        return _record("avg_pool2d", (x,), out, vjp)

    hp, wp = (ho - 1) * stride + k, (wo - 1) * stride + k
    xp = np.zeros((n, c, hp, wp), dtype=x.dtype)
    valid = np.zeros((1, 1, hp, wp), dtype=x.dtype)
    hv, wv = min(h, hp), min(w, wp)
    xp[:, :, :hv, :wv] = x.data[:, :, :hv, :wv]
    valid[:, :, :hv, :wv] = 1
    acc = np.zeros((n, c, ho, wo), dtype=x.dtype)
    counts = np.zeros((1, 1, ho, wo), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            acc += _tap(xp, i, j, stride, ho, wo)
            counts += _tap(valid, i, j, stride, ho, wo)
    out = acc / counts

    def vjp(g):
        gs = g / counts
        gxp = np.zeros((n, c, hp, wp), dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                _tap(gxp, i, j, stride, ho, wo)[...] += gs
        gx = np.zeros((n, c, h, w), dtype=g.dtype)
        gx[:, :, :hv, :wv] = gxp[:, :, :hv, :wv]
        return (gx,)

    return _record("avg_pool2d", (x,), out, vjp)


def global_avg_pool(x) -> Tensor:
    x = as_tensor(x)
    _rank4(x, "global_avg_pool")
    n, c, h, w = x.shape
    if h < 1 or w < 1:
        raise ShapeMismatch("global_avg_pool needs a non-empty spatial extent")
    inv = x.dtype.type(1.0 / (h * w))
    out = x.data.mean(axis=(2, 3))

    def vjp(g):
        return (np.broadcast_to((g * inv)[:, :, None, None], (n, c, h, w)).copy(),)

    return _record("global_avg_pool", (x,), out, vjp)


# --------------------------------------------------------------------------
# normalisation


def _channel_vec(v: Tensor, c: int, name: str) -> np.ndarray:
    if v.shape != (c,):
        raise ShapeMismatch(f"{name} has shape {v.shape}, expected ({c},)")
    return v.data[None, :, None, None]


def batch_norm_infer(x, p: BatchNormParams) -> Tensor:
    """Inference batch norm with running statistics (treated as constants)."""
    x = as_tensor(x)
    _rank4(x, "batch_norm_infer")
    c = x.shape[1]
    gamma, beta = _param(p.gamma, x.dtype), _param(p.beta, x.dtype)
    mean = _channel_vec(_param(p.running_mean, x.dtype), c, "running_mean")
    var = _channel_vec(_param(p.running_var, x.dtype), c, "running_var")
    g4, b4 = _channel_vec(gamma, c, "gamma"), _channel_vec(beta, c, "beta")
    rstd = 1.0 / np.sqrt(var + x.dtype.type(p.eps))
    xhat = (x.data - mean) * rstd
    out = xhat * g4 + b4

    def vjp(g):
        return (g * (g4 * rstd), (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _record("batch_norm", (x, gamma, beta), out, vjp)


def layer_norm(x, p: LayerNormParams) -> Tensor:
    """Normalise over the channel axis independently at every spatial position."""
    x = as_tensor(x)
    _rank4(x, "layer_norm")
    c = x.shape[1]
    gamma, beta = _param(p.gamma, x.dtype), _param(p.beta, x.dtype)
    g4, b4 = _channel_vec(gamma, c, "gamma"), _channel_vec(beta, c, "beta")
    mu = x.data.mean(axis=1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + x.dtype.type(p.eps))
    xhat = xc * rstd
    out = xhat * g4 + b4

    def vjp(g):
        gh = g * g4
        gx = rstd * (gh - gh.mean(axis=1, keepdims=True) - xhat * (gh * xhat).mean(axis=1, keepdims=True))
        return (gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3)))

    return _record("layer_norm", (x, gamma, beta), out, vjp)


# --------------------------------------------------------------------------
# activations


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return _record("relu", (x,), np.where(mask, x.data, 0).astype(x.dtype), lambda g: (g * mask,))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation: 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))."""
    x = as_tensor(x)
    d = x.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(0.044715)
    t = np.tanh(c * (d + k * d**3))
    out = 0.5 * d * (1 + t)

    def vjp(g):
        dt = (1 - t * t) * c * (1 + 3 * k * d * d)
        return (g * (0.5 * (1 + t) + 0.5 * d * dt),)

    return _record("gelu", (x,), out.astype(x.dtype), vjp)


# --------------------------------------------------------------------------
# linear


def linear(x, p: LinearParams) -> Tensor:
    """``x @ W.T + b`` over the last axis; leading axes are treated as tokens."""
    x = as_tensor(x)
    w = _param(p.weight, x.dtype)
    b = _param(p.bias, x.dtype)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise ShapeMismatch(f"linear: input features {x.shape[-1]} vs weight {w.shape}")
    out_f, in_f = w.shape
    if b is not None and b.shape != (out_f,):
        raise ShapeMismatch(f"linear bias shape {b.shape} != ({out_f},)")
    out = x.data @ w.data.T
    if b is not None:
        out += b.data

    def vjp(g):
        g2 = g.reshape(-1, out_f)
        gw = g2.T @ x.data.reshape(-1, in_f)
        gb = g2.sum(axis=0) if b is not None else None
        return (g @ w.data, gw, gb)

    return _record("linear", (x, w, b), out, vjp)
