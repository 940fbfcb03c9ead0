"""Gradient and oracle-equivalence suites behind ``nextvit gradcheck`` / ``selftest``."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Iterator, Sequence

import numpy as np

from . import ops
from .blocks import (
    EMHSASpec,
    MHCASpec,
    NCBSpec,
    NTBSpec,
    attention_impl,
    block_decls,
    emhsa_decls,
    emhsa_forward,
    mhca_decls,
    mhca_forward,
    ncb_forward,
    ntb_forward,
)
from .params import cast_params, init_from_decls
from .tensor import (
    Tape,
    Tensor,
    add,
    backward,
    concat_channels,
    finite_diff_grad,
    make_rng,
    matmul,
    mul,
    reshape,
    slice_channels,
    softmax_rows,
    sum_all,
    transpose,
)
from . import oracles

GRAD_TOL = 1e-3
GRAD_EPS = 1e-4
GRAD_FLOOR = 1e-6


@dataclass
class GradReport:
    name: str
    max_abs_err: float
    max_rel_err: float
    worst: tuple  # (input index, coordinate) of the largest relative error
    tol: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tol

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name:<34} max_abs={self.max_abs_err:.2e} max_rel={self.max_rel_err:.2e} worst={self.worst}"


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_FLOOR):
    """Elementwise |a − n| / max(|a|, |n|, floor); returns (max abs, max rel, argmax)."""
    diff = np.abs(analytic - numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    rel = diff / denom
    idx = np.unravel_index(int(np.argmax(rel)), rel.shape) if rel.size else ()
    return float(diff.max(initial=0.0)), float(rel.max(initial=0.0)), tuple(int(i) for i in idx)


def grad_check(
    name: str,
    fn: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    seed: int = 0,
    eps: float = GRAD_EPS,
    tol: float = GRAD_TOL,
    wrt: Sequence[int] | None = None,
) -> GradReport:
    """Tape gradient of ``sum(fn(*inputs) * R)`` vs central differences, R fixed random."""
    inputs = [np.asarray(a, dtype=np.float64) for a in inputs]
    probe = fn(*[Tensor(a) for a in inputs])
    weights = make_rng(seed).standard_normal(probe.shape)

    def scalar(*ts):
        return sum_all(mul(fn(*ts), Tensor(weights)))

    tape = Tape()
    watched = [tape.watch(a) for a in inputs]
    backward(tape, scalar(*watched))

    worst = (0.0, 0.0, ())
    for i in wrt if wrt is not None else range(len(inputs)):
        analytic = tape.grad(watched[i])

        def f_i(t, i=i):
            args = [Tensor(a) for a in inputs]
            args[i] = t
            return scalar(*args)

        numeric = finite_diff_grad(f_i, inputs[i], eps).data
        a_err, r_err, idx = rel_error(analytic, numeric)
        if r_err >= worst[1] or not worst[2]:
            worst = (max(a_err, worst[0]), r_err, (i, idx))
        else:
            worst = (max(a_err, worst[0]), worst[1], worst[2])
    return GradReport(name, worst[0], worst[1], worst[2], tol)


def _rng_arrays(seed: int, *shapes):
    rng = make_rng(seed)
    return [rng.standard_normal(s) for s in shapes]


def _block_params(decls, seed):
    p = cast_params(init_from_decls(decls, make_rng(seed)), np.float64)
    rng = make_rng(seed + 1)
    # Non-trivial norm statistics and affines so every term of the chain rule is exercised.
    for k in p:
        if k.endswith("running_var"):
            p[k] = rng.uniform(0.5, 1.5, p[k].shape)
        elif k.endswith("running_mean") or k.endswith(".bias"):
            p[k] = rng.normal(0, 0.2, p[k].shape)
        elif k.endswith("norm.weight"):
            p[k] = rng.uniform(0.5, 1.5, p[k].shape)
    return p


def gradient_cases(max_size: int = 8) -> Iterator[tuple[str, Callable[[], GradReport]]]:
    """Every differentiable primitive plus both full blocks, at shapes <= (1, 32, s, s)."""
    s = max(2, min(max_size, 8))
    c = 8

    def bn(x, g, b, m, v):
        return ops.batch_norm_infer(x, ops.BatchNormParams(g, b, m, v))

    yield "add", lambda: grad_check("add", add, _rng_arrays(1, (2, 3, s, s), (2, 3, s, s)))
    yield "mul", lambda: grad_check("mul", mul, _rng_arrays(2, (1, 3, s, s), (1, 3, s, s)))
    yield "concat_channels", lambda: grad_check(
        "concat_channels", concat_channels, _rng_arrays(3, (1, 2, s, s), (1, 3, s, s))
    )
    yield "slice_channels", lambda: grad_check(
        "slice_channels", lambda x: slice_channels(x, 1, 3), _rng_arrays(4, (1, 4, s, s))
    )
    yield "reshape+transpose", lambda: grad_check(
        "reshape+transpose",
        lambda x: transpose(reshape(x, (2, 4, s * s)), (0, 2, 1)),
        _rng_arrays(5, (2, 4, s, s)),
    )
    yield "softmax_rows", lambda: grad_check("softmax_rows", softmax_rows, _rng_arrays(6, (4, 2, 5, 7)))
    yield "matmul", lambda: grad_check("matmul", matmul, _rng_arrays(7, (2, 5, 6), (2, 6, 3)))
    yield "sum", lambda: grad_check("sum", lambda x: reshape(sum_all(x), (1,)), _rng_arrays(8, (1, 3, s, s)))
    yield "conv2d 3x3 groups=2 stride=2", lambda: grad_check(
        "conv2d 3x3 groups=2 stride=2",
        lambda x, w, b: ops.conv2d(x, ops.ConvParams(w, b, stride=2, padding=1, groups=2)),
        _rng_arrays(9, (1, 4, s, s), (6, 2, 3, 3), (6,)),
    )
    yield "conv2d 3x3 depthwise-heads", lambda: grad_check(
        "conv2d 3x3 depthwise-heads",
        lambda x, w: ops.conv2d(x, ops.ConvParams(w, None, stride=1, padding=1, groups=4)),
        _rng_arrays(10, (1, c, s, s), (c, 2, 3, 3)),
    )
    yield "conv2d 1x1", lambda: grad_check(
        "conv2d 1x1",
        lambda x, w, b: ops.conv2d(x, ops.ConvParams(w, b)),
        _rng_arrays(11, (2, c, s, s), (5, c, 1, 1), (5,)),
    )
    yield "avg_pool2d k=stride=2", lambda: grad_check(
        "avg_pool2d k=stride=2", lambda x: ops.avg_pool2d(x, 2, 2), _rng_arrays(12, (1, 3, s, s))
    )
    yield "avg_pool2d ceil s=3", lambda: grad_check(
        "avg_pool2d ceil s=3", lambda x: ops.avg_pool2d(x, 3, 3, ceil_mode=True), _rng_arrays(13, (1, 3, s, s - 1))
    )
    yield "global_avg_pool", lambda: grad_check("global_avg_pool", ops.global_avg_pool, _rng_arrays(14, (2, 3, s, s)))
    yield "batch_norm_infer", lambda: grad_check(
        "batch_norm_infer",
        lambda x, g, b: bn(x, g, b, np.full(c, 0.1), np.full(c, 0.7)),
        _rng_arrays(15, (2, c, s, s), (c,), (c,)),
    )
    yield "layer_norm", lambda: grad_check(
        "layer_norm",
        lambda x, g, b: ops.layer_norm(x, ops.LayerNormParams(g, b)),
        _rng_arrays(16, (1, c, s, s), (c,), (c,)),
    )
    yield "relu", lambda: grad_check("relu", ops.relu, _rng_arrays(17, (1, c, s, s)))
    yield "gelu", lambda: grad_check("gelu", ops.gelu, _rng_arrays(18, (1, c, s, s)))
    yield "linear", lambda: grad_check(
        "linear",
        lambda x, w, b: ops.linear(x, ops.LinearParams(w, b)),
        _rng_arrays(19, (2, 7, 6), (4, 6), (4,)),
    )

    def mhca_case():
        spec = MHCASpec(32, head_dim=8)
        p = _block_params(mhca_decls(spec), 20)
        return grad_check("MHCA", lambda x: mhca_forward(x, spec, p), _rng_arrays(20, (1, 32, s, s)))

    def emhsa_case():
        spec = EMHSASpec(32, head_dim=8, sr_ratio=2)
        p = _block_params(emhsa_decls(spec), 21)
        return grad_check("E-MHSA s=2", lambda x: emhsa_forward(x, spec, p), _rng_arrays(21, (1, 32, s, s)))

    yield "MHCA", mhca_case
    yield "E-MHSA s=2", emhsa_case

    for label, spec, seed in _block_grid():
        yield label, (lambda spec=spec, seed=seed, label=label: _block_grad(label, spec, seed, s))


def _block_grid():
    yield "NCB (1,32,8,8)", NCBSpec.make(32, 32, head_dim=8), 30
    yield "NCB adapter 16->32", NCBSpec.make(16, 32, head_dim=8), 31
    yield "NTB r=0.75 s=2 (1,32,8,8)", NTBSpec.make(32, 32, shrink_ratio=0.75, sr_ratio=2, head_dim=8), 32
    yield "NTB r=0.75 s=2 LN/GELU", NTBSpec.make(
        32, 32, shrink_ratio=0.75, sr_ratio=2, head_dim=8, norm="ln", act="gelu"
    ), 33


def _block_grad(label, spec, seed, s):
    params = _block_params(block_decls(spec), seed)
    fwd = ncb_forward if isinstance(spec, NCBSpec) else ntb_forward
    x = _rng_arrays(seed, (1, spec.in_channels, s, s))
    return grad_check(label, lambda t: fwd(t, spec, params), x, seed=seed)


def run_gradient_suite(max_size: int = 8, emit: Callable[[str], None] | None = None) -> list[GradReport]:
    reports = []
    for _, case in gradient_cases(max_size):
        t0 = time.perf_counter()
        r = case()
        reports.append(r)
        if emit:
            emit(f"{r.line()} ({time.perf_counter() - t0:.1f}s)")
    return reports


# --------------------------------------------------------------------------
# oracle equivalence


@dataclass
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        return f"{tag} {self.name:<46} err={self.error:.2e} tol={self.tol:.0e}"


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a, np.float64) - np.asarray(b, np.float64)), initial=0.0))


def check_grouped_conv(seed: int = 0) -> list[CheckResult]:
    rng = make_rng(seed)
    out = []
    cases = [((1, 4, 5, 5), (4, 2, 3, 3), 1, 1, 2), ((2, 6, 7, 7), (9, 2, 3, 3), 2, 1, 3), ((1, 3, 9, 9), (8, 3, 3, 3), 2, 1, 1)]
    for xs, ws, stride, pad, groups in cases:
        x = rng.standard_normal(xs).astype(np.float32)
        w = rng.standard_normal(ws).astype(np.float32)
        b = rng.standard_normal(ws[0]).astype(np.float32)
        ref = oracles.naive_conv2d(x, w, b, stride, pad, groups)
        for method in ("direct", "im2col"):
            got = ops.conv2d(x, ops.ConvParams(w, b, stride, pad, groups), method=method).data
            out.append(CheckResult(f"conv2d {method} g={groups} s={stride} vs loop (single)", _max_abs(got, ref), 1e-5))
        xd, wd_ = x.astype(np.float64), w.astype(np.float64)
        got = ops.conv2d(xd, ops.ConvParams(wd_, b.astype(np.float64), stride, pad, groups)).data
        out.append(CheckResult(f"conv2d g={groups} s={stride} vs loop (double)", _max_abs(got, ref), 1e-12))
    return out


def check_mhca_single_head(seed: int = 0) -> CheckResult:
    """MHCA with head_dim == channels against dense conv → BN → ReLU → 1x1 conv → BN."""
    c = 16
    spec = MHCASpec(c, head_dim=c)
    p = _block_params(mhca_decls(spec), seed)
    p = cast_params(p, np.float32)
    x = make_rng(seed).standard_normal((1, c, 6, 6)).astype(np.float32)
    got = mhca_forward(x, spec, p).data

    def bn(y, pre):
        g, b, m, v = (p[f"{pre}.{k}"].astype(np.float64)[None, :, None, None] for k in ("weight", "bias", "running_mean", "running_var"))
        return (y - m) / np.sqrt(v + 1e-5) * g + b

    y = oracles.naive_conv2d(x, p["group.conv.weight"], None, 1, 1, 1)
    y = np.maximum(bn(y, "group.norm"), 0)
    y = bn(oracles.naive_conv2d(y, p["proj.conv.weight"]), "proj.norm")
    return CheckResult("MHCA h=1 vs dense conv oracle", _max_abs(got, y), 1e-6)


def check_emhsa_bruteforce(seed: int = 0, grid: int = 8) -> CheckResult:
    """E-MHSA with s=1 against plain multi-head self-attention over all tokens."""
    c, d = 32, 8
    spec = EMHSASpec(c, head_dim=d, sr_ratio=1)
    p = cast_params(_block_params(emhsa_decls(spec), seed), np.float32)
    x = make_rng(seed).standard_normal((1, c, grid, grid)).astype(np.float32)
    got = emhsa_forward(x, spec, p).data
    # The key/value BN acts on the un-pooled map when s=1.
    g, b, m, v = (p[f"norm.{k}"].astype(np.float64) for k in ("weight", "bias", "running_mean", "running_var"))
    a = g / np.sqrt(v + 1e-5)
    wk = p["k.weight"].astype(np.float64) * a
    bk = p["k.weight"].astype(np.float64) @ (b - m * a) + p["k.bias"]
    wv = p["v.weight"].astype(np.float64) * a
    bv = p["v.weight"].astype(np.float64) @ (b - m * a) + p["v.bias"]
    ref = oracles.full_attention_layer(
        x, p["q.weight"].astype(np.float64), p["q.bias"], wk, bk, wv, bv,
        p["proj.weight"].astype(np.float64), p["proj.bias"], c // d, spec.scale,
    )
    return CheckResult(f"E-MHSA s=1 vs brute-force attention {grid}x{grid}", _max_abs(got, ref), 1e-5)


def check_softmax(seed: int = 0) -> CheckResult:
    row = [1.0, 2.0, 3.0]
    got = softmax_rows(np.array([row])).data[0]
    return CheckResult("softmax_rows vs scalar formula", _max_abs(got, oracles.scalar_softmax(row)), 1e-12)


def check_avg_pool(seed: int = 0) -> CheckResult:
    x = make_rng(seed).standard_normal((2, 3, 8, 6))
    return CheckResult("avg_pool2d vs loop oracle", _max_abs(ops.avg_pool2d(x, 2, 2).data, oracles.naive_avg_pool(x, 2, 2)), 1e-12)


def check_fold_conv_bn(seed: int = 0) -> CheckResult:
    from .analysis import fold_conv_bn

    rng = make_rng(seed)
    x = rng.standard_normal((2, 8, 9, 9)).astype(np.float32)
    conv = ops.ConvParams(rng.standard_normal((12, 4, 3, 3)).astype(np.float32), None, 2, 1, 2)
    bn = ops.BatchNormParams(
        *(a.astype(np.float32) for a in (rng.uniform(0.5, 1.5, 12), rng.normal(0, 0.5, 12),
                                          rng.normal(0, 0.5, 12), rng.uniform(0.5, 2.0, 12)))
    )
    ref = ops.batch_norm_infer(ops.conv2d(x, conv), bn).data
    got = ops.conv2d(x, fold_conv_bn(conv, bn)).data
    return CheckResult("BN-folded conv vs conv+BN (single)", _max_abs(got, ref), 1e-4)


def check_fold_tiny_model(seed: int = 0) -> CheckResult:
    """End-to-end fold on a small model; error is reported as inf if any argmax flips."""
    from .analysis import check_equivalence, fold_batchnorm, random_inputs, trained_like_params
    from .model import init_params

    spec = tiny_model()
    p = trained_like_params(spec, init_params(spec, seed), random_inputs(4, seed + 1, (64, 64)), seed + 2)
    fs, fp = fold_batchnorm(spec, p)
    r = check_equivalence(spec, p, fs, fp, n_samples=4, seed=seed, input_size=(64, 64))
    return CheckResult("BN-folded small model vs unfolded logits", r.max_abs_err if all(r.argmax_match) else np.inf, 5e-3)


def tiny_model(**hyper):
    """Small four-stage hybrid used by fast self-checks (head_dim 8, one NTB per stage)."""
    from .model import build_hybrid

    hyper.setdefault("head_dim", 8)
    hyper.setdefault("num_classes", 10)
    return build_hybrid(
        "H H H H",
        channels=((16, 16), (16, 24), (24, 32), (32, 40)),
        depths=(1, 1, 1, 1),
        **hyper,
    ).with_options(stem=((8, 2), (8, 1), (16, 1), (16, 2)))


def check_reference_attention_model(seed: int = 0) -> CheckResult:
    from .analysis import check_equivalence
    from .model import forward, init_params

    spec = tiny_model(sr_ratios=(1, 1, 1, 1), num_classes=10)
    p = init_params(spec, seed)

    def reference(s, prm, x):
        with attention_impl("reference"):
            return forward(s, prm, x)

    r = check_equivalence(spec, p, spec, p, n_samples=2, seed=seed, input_size=(32, 32), tol=1e-5,
                          forward_b=reference, precision=np.float64)
    return CheckResult("model s=1 vs brute-force attention model", r.max_abs_err, 1e-5)


def run_selftest(emit: Callable[[str], None] | None = None) -> list[CheckResult]:
    results: list[CheckResult] = []
    results += check_grouped_conv()
    results += [
        check_avg_pool(),
        check_softmax(),
        check_mhca_single_head(),
        check_emhsa_bruteforce(),
        check_fold_conv_bn(),
        check_fold_tiny_model(),
        check_reference_attention_model(),
    ]
    if emit:
        for r in results:
            emit(r.line())
    return results
