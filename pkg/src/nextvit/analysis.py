"""Cost accounting, BatchNorm folding and numerical equivalence checks."""
from __future__ import annotations

import csv
import io
import math
import re
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from . import ops
from .blocks import NCBSpec, bn_calibration
from .errors import NotFoldable, ShapeMismatch, SignatureMismatch
from .model import ModelSpec, forward, node_kinds, param_decls, validate_params
from .params import NON_LEARNABLE, ParamDecl, ParamSet
from .tensor import make_rng


@dataclass
class ModuleCost:
    path: str
    params: int
    flops: int


@dataclass
class CostReport:
    """Learnable parameter count and MACs (one multiply-accumulate = one FLOP)."""

    params_total: int
    flops_total: int
    per_module: list[ModuleCost] = field(default_factory=list)
    input_size: Optional[tuple[int, int]] = None

    def by_stage(self) -> dict[str, tuple[int, int]]:
        out: dict[str, tuple[int, int]] = {}
        for m in self.per_module:
            key = ".".join(m.path.split(".")[:2]) if m.path.startswith("stages.") else m.path
            p, f = out.get(key, (0, 0))
            out[key] = (p + m.params, f + m.flops)
        return out

    def table(self) -> str:
        lines = [f"{'module':<24}{'params':>14}{'MACs':>18}"]
        for key, (p, f) in self.by_stage().items():
            lines.append(f"{key:<24}{p:>14,}{f:>18,}")
        lines.append(f"{'total':<24}{self.params_total:>14,}{self.flops_total:>18,}")
        size = f" @ {self.input_size[0]}x{self.input_size[1]}" if self.input_size else ""
        lines.append(f"params {self.params_total / 1e6:.2f} M, FLOPs {self.flops_total / 1e9:.2f} G{size}")
        return "\n".join(lines)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["path", "params", "flops"])
        for m in self.per_module:
            w.writerow([m.path, m.params, m.flops])
        w.writerow(["total", self.params_total, self.flops_total])
        return buf.getvalue()


_MODULE_RE = re.compile(r"^(stem|head|stages\.\d+\.embed|stages\.\d+\.blocks\.\d+)\.")


def module_path(key: str) -> str:
    m = _MODULE_RE.match(key)
    if not m:
        raise KeyError(f"parameter {key} does not belong to a known module")
    return m.group(1)


def count_learnable(decls: Mapping[str, ParamDecl]) -> int:
    """Learnable scalars in a declaration map (BN running statistics excluded)."""
    return sum(int(np.prod(d.shape)) for d in decls.values() if d.kind not in NON_LEARNABLE)


def _module_params(spec: ModelSpec) -> dict[str, int]:
    counts: dict[str, int] = {}
    for key, decl in param_decls(spec).items():
        if decl.kind in NON_LEARNABLE:
            continue
        path = module_path(key)
        counts[path] = counts.get(path, 0) + int(np.prod(decl.shape))
    return counts


def count_params(spec: ModelSpec) -> CostReport:
    """Exact count of learnable scalars (running statistics excluded)."""
    counts = _module_params(spec)
    modules = [ModuleCost(p, c, 0) for p, c in counts.items()]
    return CostReport(sum(counts.values()), 0, modules)


def _ceil_div(a, b):
    return -(-a // b)


def _mhca_macs(c, head_dim, hw):
    return 9 * head_dim * c * hw + c * c * hw


def _block_macs(b, h, w) -> int:
    hw = h * w
    macs = 0
    if isinstance(b, NCBSpec):
        if b.in_channels != b.out_channels:
            macs += b.in_channels * b.out_channels * hw
        macs += _mhca_macs(b.out_channels, b.mhca.head_dim, hw)
    else:
        src = b.in_channels
        if b.emhsa:
            c = b.c_hi
            if b.in_channels != c:
                macs += b.in_channels * c * hw
            s = b.emhsa.sr_ratio
            m = _ceil_div(h, s) * _ceil_div(w, s) if s > 1 else hw
            macs += c * c * hw  # queries
            macs += 2 * c * c * m  # keys and values
            macs += 2 * hw * m * c  # q·kᵀ and attn·v over all heads
            macs += c * c * hw  # output projection
            src = c
        if b.mhca:
            macs += src * b.c_lo * hw
            macs += _mhca_macs(b.c_lo, b.mhca.head_dim, hw)
    macs += 2 * b.out_channels * b.hidden * hw
    return macs


def count_flops(spec: ModelSpec, input_size: tuple[int, int] = (224, 224)) -> CostReport:
    """MACs for one image: conv = k²·(Cin/g)·Cout·Hout·Wout, linear = in·out·tokens,
    attention = tokens·key_tokens·head_dim per head for each of q·kᵀ and attn·v.
    Pooling, norms, activations and bias additions count as zero."""
    h, w = input_size
    if h % 32 or w % 32:
        raise ShapeMismatch(f"input size {input_size} must be divisible by 32")
    params = _module_params(spec)
    flops: dict[str, int] = {}

    stem = 0
    c = 3
    for cout, stride in spec.stem:
        h, w = (h - 1) // stride + 1, (w - 1) // stride + 1
        stem += 9 * c * cout * h * w
        c = cout
    flops["stem"] = stem
    for si, st in enumerate(spec.stages):
        if st.patch_embed.downsample:
            h, w = h // 2, w // 2
        flops[f"stages.{si}.embed"] = c * st.patch_embed.out_channels * h * w
        for bi, b in enumerate(st.blocks):
            flops[f"stages.{si}.blocks.{bi}"] = _block_macs(b, h, w)
        c = st.out_channels
    flops["head"] = c * spec.num_classes

    modules = [ModuleCost(p, params.get(p, 0), f) for p, f in flops.items()]
    return CostReport(sum(params.values()), sum(flops.values()), modules, tuple(input_size))


# --------------------------------------------------------------------------
# BatchNorm folding


def _bn_scale_shift(params: Mapping, prefix: str, eps: float = 1e-5):
    gamma = params[f"{prefix}.weight"].astype(np.float64)
    beta = params[f"{prefix}.bias"].astype(np.float64)
    mean = params[f"{prefix}.running_mean"].astype(np.float64)
    var = params[f"{prefix}.running_var"].astype(np.float64)
    scale = gamma / np.sqrt(var + eps)
    return scale, beta - mean * scale


def fold_conv_bn(conv: ops.ConvParams, bn: ops.BatchNormParams) -> ops.ConvParams:
    """Single conv followed by inference BN, merged into one biased conv."""
    scale = np.asarray(bn.gamma, np.float64) / np.sqrt(np.asarray(bn.running_var, np.float64) + bn.eps)
    shift = np.asarray(bn.beta, np.float64) - np.asarray(bn.running_mean, np.float64) * scale
    w = np.asarray(conv.weight, np.float64)
    b = np.zeros(w.shape[0]) if conv.bias is None else np.asarray(conv.bias, np.float64)
    dtype = np.asarray(conv.weight).dtype
    return ops.ConvParams(
        (w * scale[:, None, None, None]).astype(dtype), (b * scale + shift).astype(dtype),
        conv.stride, conv.padding, conv.groups,
    )


def fold_batchnorm(spec: ModelSpec, params: Mapping) -> tuple[ModelSpec, ParamSet]:
    """Absorb every inference BatchNorm into its adjacent conv or linear layer.

    Conv followed by BN becomes a conv with bias
    ``w' = w·γ/√(σ²+ε)``, ``b' = (b − μ)·γ/√(σ²+ε) + β``.  The BN that sits on
    the pooled keys/values of E-MHSA is folded forward into the key and value
    projections.
    """
    if spec.norm == "folded":
        return spec, dict(params)
    if spec.norm != "bn":
        bad = [p for p, kind in node_kinds(spec).items() if kind == "ln"]
        raise NotFoldable(bad)
    validate_params(spec, params)

    folded: dict[str, np.ndarray] = {}
    bad = []
    for key in param_decls(spec):
        if not key.endswith(".running_var"):
            continue
        norm = key[: -len(".running_var")]
        owner = norm[: -len(".norm")] if norm.endswith(".norm") else None
        scale, shift = _bn_scale_shift(params, norm)
        if owner and f"{owner}.conv.weight" in params and not owner.endswith("emhsa"):
            w = params[f"{owner}.conv.weight"].astype(np.float64)
            b = params.get(f"{owner}.conv.bias")
            b = np.zeros(w.shape[0]) if b is None else b.astype(np.float64)
            folded[f"{owner}.conv.weight"] = (w * scale[:, None, None, None]).astype(np.float32)
            folded[f"{owner}.conv.bias"] = (b * scale + shift).astype(np.float32)
        elif owner and owner.endswith("emhsa"):
            for proj in ("k", "v"):
                w = params[f"{owner}.{proj}.weight"].astype(np.float64)
                b = params[f"{owner}.{proj}.bias"].astype(np.float64)
                folded[f"{owner}.{proj}.weight"] = (w * scale[None, :]).astype(np.float32)
                folded[f"{owner}.{proj}.bias"] = (w @ shift + b).astype(np.float32)
        else:
            bad.append(norm)
    if bad:
        raise NotFoldable(bad)

    new_spec = spec.with_options(norm="folded")
    out: ParamSet = {}
    for key in param_decls(new_spec):
        out[key] = folded[key] if key in folded else np.array(params[key], dtype=np.float32)
    validate_params(new_spec, out)
    return new_spec, out


def count_bn_nodes(spec: ModelSpec) -> int:
    return sum(kind == "bn" for kind in node_kinds(spec).values())


# --------------------------------------------------------------------------
# equivalence


@dataclass
class EquivReport:
    max_abs_err: float
    max_rel_err: float
    argmax_match: list[bool]
    samples: int
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_abs_err < self.tol and all(self.argmax_match)

    def summary(self) -> str:
        agree = sum(self.argmax_match)
        verdict = "PASS" if self.passed else "FAIL"
        return (
            f"{verdict} samples={self.samples} max_abs_err={self.max_abs_err:.3e} "
            f"max_rel_err={self.max_rel_err:.3e} argmax_agree={agree}/{self.samples} tol={self.tol:g}"
        )


def random_inputs(n: int, seed: int, input_size=(224, 224)) -> np.ndarray:
    rng = make_rng(seed)
    return rng.standard_normal((n, 3, *input_size)).astype(np.float32)


def check_equivalence(
    spec_a: ModelSpec,
    params_a: Mapping,
    spec_b: ModelSpec,
    params_b: Mapping,
    n_samples: int = 16,
    seed: int = 0,
    tol: float = 5e-3,
    input_size: tuple[int, int] = (224, 224),
    batch: int = 8,
    forward_b: Optional[Callable] = None,
    precision=np.float32,
) -> EquivReport:
    """Compare two models' logits on the same seeded random inputs.

    ``precision`` sets the dtype of the inputs (and so of the whole forward).
    """
    if spec_a.num_classes != spec_b.num_classes or spec_a.stem[0] != spec_b.stem[0]:
        raise SignatureMismatch(
            f"models disagree on signature: {spec_a.num_classes} vs {spec_b.num_classes} classes"
        )
    run_b = forward_b or forward
    xs = random_inputs(n_samples, seed, input_size).astype(precision)
    abs_err, rel_err, agree = 0.0, 0.0, []
    for s in range(0, n_samples, batch):
        x = xs[s : s + batch]
        ya = forward(spec_a, params_a, x).data.astype(np.float64)
        yb = run_b(spec_b, params_b, x).data.astype(np.float64)
        diff = np.abs(ya - yb)
        abs_err = max(abs_err, float(diff.max()))
        rel_err = max(rel_err, float(diff.max() / max(np.abs(ya).max(), 1e-12)))
        agree.extend((ya.argmax(axis=1) == yb.argmax(axis=1)).tolist())
    return EquivReport(abs_err, rel_err, agree, n_samples, tol)


# --------------------------------------------------------------------------
# BatchNorm statistics


def calibrate_batchnorm(spec: ModelSpec, params: Mapping, x) -> ParamSet:
    """Return a copy of ``params`` whose BN running statistics equal the batch
    statistics seen on ``x``, layer by layer (as after training)."""
    if spec.norm != "bn":
        return dict(params)
    with bn_calibration() as stats:
        forward(spec, params, x)
    out = dict(params)
    for prefix, (mean, var) in stats.items():
        out[f"{prefix}.running_mean"] = mean.astype(np.float32)
        out[f"{prefix}.running_var"] = var.astype(np.float32)
    return out


def jitter_norm_affine(params: Mapping, seed: int, spread: float = 0.2) -> ParamSet:
    """Perturb every norm gamma/beta so folding is exercised with non-trivial affines."""
    rng = make_rng(seed)
    out = dict(params)
    for key in params:
        if key.endswith(".norm.weight"):
            out[key] = (params[key] * rng.uniform(1 - spread, 1 + spread, params[key].shape)).astype(np.float32)
        elif key.endswith(".norm.bias"):
            out[key] = (params[key] + rng.normal(0, spread, params[key].shape)).astype(np.float32)
    return out


def trained_like_params(spec: ModelSpec, params: Mapping, x, seed: int, spread: float = 0.2) -> ParamSet:
    """Jitter norm affines, then set BN running statistics from ``x``.

    The order matters: statistics gathered after the affines change describe
    the activations each BN really sees, as in a trained network.  Jittering
    afterwards would leave them stale and let offsets compound with depth.
    """
    return calibrate_batchnorm(spec, jitter_norm_affine(params, seed, spread), x)


def gap_report(report: CostReport, target_millions: float) -> str:
    """Explain a param-count gap against a reference figure by module group."""
    stages = report.by_stage()
    delta = report.params_total - target_millions * 1e6
    lines = [f"total {report.params_total / 1e6:.3f} M vs {target_millions} M ({delta / 1e6:+.3f} M)"]
    for key in ("stem", "head"):
        if key in stages:
            lines.append(f"  {key}: {stages[key][0]:,} params")
    return "\n".join(lines)


def relative_gap(value: float, target: float) -> float:
    return abs(value - target) / target if target else math.inf
