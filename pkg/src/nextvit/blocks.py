"""Next Convolution Block (NCB) and Next Transformer Block (NTB).

Both blocks work on the ``(n, c, h, w)`` layout end to end; the MLPs are 1x1
convolutions.  Each conv is immediately followed by its norm so the pair can
be folded for deployment; ``norm="folded"`` means the norm has already been
absorbed and the conv carries a bias instead.
"""
from __future__ import annotations

import contextlib
import contextvars
import math
from dataclasses import dataclass
from typing import Literal, Mapping, Optional, Union

import numpy as np

from . import ops
from .errors import HeadMismatch, InvalidRatio, ShapeMismatch
from .params import BETA, BIAS, CONV, GAMMA, LINEAR, MEAN, VAR, ParamDecl, full_key, scope
from .tensor import (
    Tensor,
    add,
    as_tensor,
    concat_channels,
    matmul,
    mul,
    reshape,
    softmax_rows,
    transpose,
)

Norm = Literal["bn", "ln", "folded"]
Act = Literal["relu", "gelu"]
ScaleMode = Literal["sqrt", "linear"]

NORMS = ("bn", "ln", "folded")
ACTS = ("relu", "gelu")
SCALE_MODES = ("sqrt", "linear")


def _check_choice(value, choices, what):
    if value not in choices:
        raise ValueError(f"unknown {what} {value!r}; expected one of {choices}")


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class MHCASpec:
    channels: int
    head_dim: int = 32
    norm: Norm = "bn"
    act: Act = "relu"

    def __post_init__(self):
        _check_choice(self.norm, NORMS, "norm")
        _check_choice(self.act, ACTS, "activation")
        if self.head_dim < 1 or self.channels < 1 or self.channels % self.head_dim:
            raise HeadMismatch(f"channels {self.channels} not divisible by head_dim {self.head_dim}")

    @property
    def heads(self) -> int:
        return self.channels // self.head_dim


@dataclass(frozen=True)
class NCBSpec:
    in_channels: int
    out_channels: int
    mhca: MHCASpec
    mlp_ratio: float = 3.0

    def __post_init__(self):
        if self.mhca.channels != self.out_channels:
            raise ShapeMismatch("NCB mixer width must equal out_channels")
        if self.hidden < 1:
            raise ValueError("mlp hidden width must be at least 1")

    @property
    def hidden(self) -> int:
        return round_half_up(self.out_channels * self.mlp_ratio)

    @property
    def norm(self) -> Norm:
        return self.mhca.norm

    @property
    def act(self) -> Act:
        return self.mhca.act

    @classmethod
    def make(cls, in_channels, out_channels, *, head_dim=32, norm="bn", act="relu", mlp_ratio=3.0):
        return cls(in_channels, out_channels, MHCASpec(out_channels, head_dim, norm, act), mlp_ratio)


@dataclass(frozen=True)
class EMHSASpec:
    channels: int
    head_dim: int = 32
    sr_ratio: int = 1
    norm: Norm = "bn"
    scale_mode: ScaleMode = "sqrt"

    def __post_init__(self):
        _check_choice(self.norm, NORMS, "norm")
        _check_choice(self.scale_mode, SCALE_MODES, "attention scale mode")
        if self.head_dim < 1 or self.channels < 1 or self.channels % self.head_dim:
            raise HeadMismatch(f"channels {self.channels} not divisible by head_dim {self.head_dim}")
        if self.sr_ratio < 1:
            raise ValueError("sr_ratio must be >= 1")

    @property
    def heads(self) -> int:
        return self.channels // self.head_dim

    @property
    def scale(self) -> float:
        return 1.0 / (math.sqrt(self.head_dim) if self.scale_mode == "sqrt" else self.head_dim)


def split_channels(out_channels: int, shrink_ratio: float, head_dim: int) -> tuple[int, int]:
    """Channel split of an NTB into (attention branch, convolution branch).

    ``r * out`` is rounded half-up and then snapped to the nearest multiple of
    ``head_dim``; a tie goes to the attention branch.
    """
    if not 0.0 <= shrink_ratio <= 1.0:
        raise InvalidRatio(f"shrink ratio {shrink_ratio} outside [0, 1]")
    raw = round_half_up(shrink_ratio * out_channels)
    lower = (raw // head_dim) * head_dim
    upper = lower + head_dim
    c_hi = upper if (upper - raw) <= (raw - lower) else lower
    c_hi = min(max(c_hi, 0), out_channels)
    c_lo = out_channels - c_hi
    for width in (c_hi, c_lo):
        if width and width % head_dim:
            raise InvalidRatio(
                f"branch width {width} of {out_channels} channels not divisible by head_dim {head_dim}"
            )
    return c_hi, c_lo


@dataclass(frozen=True)
class NTBSpec:
    in_channels: int
    out_channels: int
    shrink_ratio: float
    emhsa: Optional[EMHSASpec]
    mhca: Optional[MHCASpec]
    norm: Norm = "bn"
    act: Act = "relu"
    mlp_ratio: float = 2.0

    @property
    def c_hi(self) -> int:
        return self.emhsa.channels if self.emhsa else 0

    @property
    def c_lo(self) -> int:
        return self.mhca.channels if self.mhca else 0

    @property
    def hidden(self) -> int:
        return round_half_up(self.out_channels * self.mlp_ratio)

    def __post_init__(self):
        if self.c_hi + self.c_lo != self.out_channels:
            raise InvalidRatio("branch widths must sum to out_channels")

    @classmethod
    def make(
        cls,
        in_channels,
        out_channels,
        *,
        shrink_ratio=0.75,
        sr_ratio=1,
        head_dim=32,
        norm="bn",
        act="relu",
        mlp_ratio=2.0,
        scale_mode="sqrt",
    ):
        c_hi, c_lo = split_channels(out_channels, shrink_ratio, head_dim)
        emhsa = EMHSASpec(c_hi, head_dim, sr_ratio, norm, scale_mode) if c_hi else None
        mhca = MHCASpec(c_lo, head_dim, norm, act) if c_lo else None
        return cls(in_channels, out_channels, shrink_ratio, emhsa, mhca, norm, act, mlp_ratio)


BlockSpec = Union[NCBSpec, NTBSpec]


# --------------------------------------------------------------------------
# parameter declarations


def norm_decls(prefix: str, channels: int, norm: Norm) -> dict[str, ParamDecl]:
    if norm == "folded":
        return {}
    d = {f"{prefix}.weight": ParamDecl((channels,), GAMMA), f"{prefix}.bias": ParamDecl((channels,), BETA)}
    if norm == "bn":
        d[f"{prefix}.running_mean"] = ParamDecl((channels,), MEAN)
        d[f"{prefix}.running_var"] = ParamDecl((channels,), VAR)
    return d


def conv_norm_decls(prefix, cin, cout, k, norm: Norm, groups=1) -> dict[str, ParamDecl]:
    d = {f"{prefix}.conv.weight": ParamDecl((cout, cin // groups, k, k), CONV)}
    if norm == "folded":
        d[f"{prefix}.conv.bias"] = ParamDecl((cout,), BIAS)
    d.update(norm_decls(f"{prefix}.norm", cout, norm))
    return d


def _linear_decls(prefix, fin, fout):
    return {f"{prefix}.weight": ParamDecl((fout, fin), LINEAR), f"{prefix}.bias": ParamDecl((fout,), BIAS)}


def mhca_decls(spec: MHCASpec, prefix="") -> dict[str, ParamDecl]:
    c = spec.channels
    d = conv_norm_decls(f"{prefix}group", c, c, 3, spec.norm, groups=spec.heads)
    d.update(conv_norm_decls(f"{prefix}proj", c, c, 1, spec.norm))
    return d


def _mlp_decls(prefix, channels, hidden, norm):
    d = conv_norm_decls(f"{prefix}fc1", channels, hidden, 1, norm)
    d.update(conv_norm_decls(f"{prefix}fc2", hidden, channels, 1, norm))
    return d


def emhsa_decls(spec: EMHSASpec, prefix="") -> dict[str, ParamDecl]:
    c = spec.channels
    d = _linear_decls(f"{prefix}q", c, c)
    d.update(norm_decls(f"{prefix}norm", c, spec.norm))
    d.update(_linear_decls(f"{prefix}k", c, c))
    d.update(_linear_decls(f"{prefix}v", c, c))
    d.update(_linear_decls(f"{prefix}proj", c, c))
    return d


def block_decls(spec: BlockSpec, prefix="") -> dict[str, ParamDecl]:
    d: dict[str, ParamDecl] = {}
    if isinstance(spec, NCBSpec):
        if spec.in_channels != spec.out_channels:
            d.update(conv_norm_decls(f"{prefix}adapter", spec.in_channels, spec.out_channels, 1, spec.norm))
        d.update(mhca_decls(spec.mhca, f"{prefix}mhca."))
        d.update(_mlp_decls(f"{prefix}mlp.", spec.out_channels, spec.hidden, spec.norm))
        return d
    if spec.emhsa:
        if spec.in_channels != spec.c_hi:
            d.update(conv_norm_decls(f"{prefix}proj_hi", spec.in_channels, spec.c_hi, 1, spec.norm))
        d.update(emhsa_decls(spec.emhsa, f"{prefix}emhsa."))
    if spec.mhca:
        src = spec.c_hi if spec.emhsa else spec.in_channels
        d.update(conv_norm_decls(f"{prefix}proj_lo", src, spec.c_lo, 1, spec.norm))
        d.update(mhca_decls(spec.mhca, f"{prefix}mhca."))
    d.update(_mlp_decls(f"{prefix}mlp.", spec.out_channels, spec.hidden, spec.norm))
    return d


# --------------------------------------------------------------------------
# shared pieces


_bn_sink: contextvars.ContextVar[Optional[dict]] = contextvars.ContextVar("bn_sink", default=None)


@contextlib.contextmanager
def bn_calibration():
    """Within this context every BN normalises with the statistics of the batch it
    sees and records them, keyed by the norm's full parameter prefix."""
    stats: dict[str, tuple[np.ndarray, np.ndarray]] = {}
    token = _bn_sink.set(stats)
    try:
        yield stats
    finally:
        _bn_sink.reset(token)


def normalize(x, params: Mapping, prefix: str, norm: Norm) -> Tensor:
    if norm == "bn":
        mean, var = params[f"{prefix}.running_mean"], params[f"{prefix}.running_var"]
        sink = _bn_sink.get()
        if sink is not None:
            d = as_tensor(x).data.astype(np.float64)
            mean, var = d.mean(axis=(0, 2, 3)), d.var(axis=(0, 2, 3))
            sink[full_key(params, prefix)] = (mean, var)
        p = ops.BatchNormParams(params[f"{prefix}.weight"], params[f"{prefix}.bias"], mean, var)
        return ops.batch_norm_infer(x, p)
    if norm == "ln":
        return ops.layer_norm(x, ops.LayerNormParams(params[f"{prefix}.weight"], params[f"{prefix}.bias"]))
    return as_tensor(x)


def activate(x, act: Act) -> Tensor:
    return ops.relu(x) if act == "relu" else ops.gelu(x)


def conv_norm(x, params: Mapping, prefix: str, norm: Norm, *, stride=1, padding=0, groups=1) -> Tensor:
    bias = params[f"{prefix}.conv.bias"] if norm == "folded" else None
    y = ops.conv2d(x, ops.ConvParams(params[f"{prefix}.conv.weight"], bias, stride, padding, groups))
    return normalize(y, params, f"{prefix}.norm", norm)


def mlp_forward(x, params: Mapping, norm: Norm, act: Act) -> Tensor:
    h = activate(conv_norm(x, params, "fc1", norm), act)
    return conv_norm(h, params, "fc2", norm)


def _check_channels(x: Tensor, expected: int, what: str):
    if x.ndim != 4 or x.shape[1] != expected:
        raise ShapeMismatch(f"{what} expects {expected} input channels, got shape {x.shape}")


# --------------------------------------------------------------------------
# MHCA / NCB


def mhca_grouped_stage(x, spec: MHCASpec, params: Mapping) -> Tensor:
    """Per-head 3x3 convolution, norm and activation (before the projection)."""
    x = as_tensor(x)
    _check_channels(x, spec.channels, "MHCA")
    y = conv_norm(x, params, "group", spec.norm, padding=1, groups=spec.heads)
    return activate(y, spec.act)


def mhca_forward(x, spec: MHCASpec, params: Mapping) -> Tensor:
    """Multi-head convolutional attention: grouped 3x3 conv, then pointwise projection."""
    return conv_norm(mhca_grouped_stage(x, spec, params), params, "proj", spec.norm)


def ncb_forward(x, spec: NCBSpec, params: Mapping) -> Tensor:
    x = as_tensor(x)
    _check_channels(x, spec.in_channels, "NCB")
    if spec.in_channels != spec.out_channels:
        x = conv_norm(x, params, "adapter", spec.norm)
    x = add(mhca_forward(x, spec.mhca, scope(params, "mhca")), x)
    return add(mlp_forward(x, scope(params, "mlp"), spec.norm, spec.act), x)


# --------------------------------------------------------------------------
# E-MHSA / NTB

_attention_impl: contextvars.ContextVar[str] = contextvars.ContextVar("attention_impl", default="fast")


@contextlib.contextmanager
def attention_impl(name: str):
    """Switch E-MHSA between the vectorised path and the loop-based reference."""
    _check_choice(name, ("fast", "reference"), "attention implementation")
    token = _attention_impl.set(name)
    try:
        yield
    finally:
        _attention_impl.reset(token)


def _heads(t: Tensor, n: int, tokens: int, heads: int, d: int) -> Tensor:
    return transpose(reshape(t, (n, tokens, heads, d)), (0, 2, 1, 3))


def _to_tokens(x: Tensor) -> Tensor:
    n, c, h, w = x.shape
    return transpose(reshape(x, (n, c, h * w)), (0, 2, 1))


def emhsa_qkv(x, spec: EMHSASpec, params: Mapping) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head queries (full resolution) and keys/values (pooled by ``sr_ratio``).

    Shapes: ``(n, heads, h*w, head_dim)`` and ``(n, heads, ceil(h/s)*ceil(w/s), head_dim)``.
    """
    x = as_tensor(x)
    _check_channels(x, spec.channels, "E-MHSA")
    n, c, h, w = x.shape
    heads, d = spec.heads, spec.head_dim
    q = ops.linear(_to_tokens(x), ops.LinearParams(params["q.weight"], params["q.bias"]))
    pooled = ops.avg_pool2d(x, spec.sr_ratio, spec.sr_ratio, ceil_mode=True) if spec.sr_ratio > 1 else x
    pooled = normalize(pooled, params, "norm", spec.norm)
    m = pooled.shape[2] * pooled.shape[3]
    kv = _to_tokens(pooled)
    k = ops.linear(kv, ops.LinearParams(params["k.weight"], params["k.bias"]))
    v = ops.linear(kv, ops.LinearParams(params["v.weight"], params["v.bias"]))
    return _heads(q, n, h * w, heads, d), _heads(k, n, m, heads, d), _heads(v, n, m, heads, d)


def attention(q: Tensor, k: Tensor, v: Tensor, scale: float) -> tuple[Tensor, Tensor]:
    """softmax(q kᵀ · scale) v; returns (output, attention probabilities)."""
    scores = mul(matmul(q, transpose(k, (0, 1, 3, 2))), scale)
    probs = softmax_rows(scores)
    return matmul(probs, v), probs


def emhsa_attention_weights(x, spec: EMHSASpec, params: Mapping) -> Tensor:
    q, k, _ = emhsa_qkv(x, spec, params)
    return softmax_rows(mul(matmul(q, transpose(k, (0, 1, 3, 2))), spec.scale))


def emhsa_forward(x, spec: EMHSASpec, params: Mapping) -> Tensor:
    """Efficient multi-head self-attention with average-pooled keys and values."""
    x = as_tensor(x)
    q, k, v = emhsa_qkv(x, spec, params)
    n, c, h, w = x.shape
    if _attention_impl.get() == "reference":
        from .oracles import brute_force_attention

        out = Tensor(brute_force_attention(q.data, k.data, v.data, spec.scale), x.precision)
    else:
        out, _ = attention(q, k, v, spec.scale)
    merged = reshape(transpose(out, (0, 2, 1, 3)), (n, h * w, c))
    y = ops.linear(merged, ops.LinearParams(params["proj.weight"], params["proj.bias"]))
    return reshape(transpose(y, (0, 2, 1)), (n, c, h, w))


def ntb_forward(x, spec: NTBSpec, params: Mapping) -> Tensor:
    x = as_tensor(x)
    _check_channels(x, spec.in_channels, "NTB")
    hi = lo = None
    if spec.emhsa:
        # Channel projections, like the NCB adapter, exist only where widths differ.
        z = conv_norm(x, params, "proj_hi", spec.norm) if spec.in_channels != spec.c_hi else x
        hi = add(emhsa_forward(z, spec.emhsa, scope(params, "emhsa")), z)
    if spec.mhca:
        z = conv_norm(hi if hi is not None else x, params, "proj_lo", spec.norm)
        lo = add(mhca_forward(z, spec.mhca, scope(params, "mhca")), z)
    if hi is not None and lo is not None:
        z = concat_channels(hi, lo)
    else:
        z = hi if hi is not None else lo
    return add(mlp_forward(z, scope(params, "mlp"), spec.norm, spec.act), z)


def block_forward(x, spec: BlockSpec, params: Mapping) -> Tensor:
    if isinstance(spec, NCBSpec):
        return ncb_forward(x, spec, params)
    return ntb_forward(x, spec, params)


def init_block_params(spec: BlockSpec, seed: int) -> dict[str, np.ndarray]:
    from .params import init_from_decls
    from .tensor import make_rng

    return init_from_decls(block_decls(spec), make_rng(seed))
