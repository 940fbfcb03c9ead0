"""Command-line interface: ``nextvit <subcommand> ...``.

Exit codes: 0 success, 1 a check failed, 2 usage or input error.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import NextViTError
from .model import ModelSpec, build_variant, forward, init_params, shape_trace, validate_params

EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _size(text: str) -> tuple[int, int]:
    parts = text.lower().replace("×", "x").split("x")
    try:
        h, w = (int(parts[0]), int(parts[0])) if len(parts) == 1 else (int(parts[0]), int(parts[1]))
    except (ValueError, IndexError):
        raise argparse.ArgumentTypeError(f"size must look like 224 or 224x224, got {text!r}") from None
    if h <= 0 or w <= 0 or len(parts) > 2:
        raise argparse.ArgumentTypeError(f"invalid size {text!r}")
    return h, w


def _positive(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return v


def _non_negative(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def load_model_config(ref: str) -> ModelSpec:
    """A config file path, inline JSON, or one of the preset names S, B, L."""
    from .config import load_config, parse_config

    if os.path.exists(ref):
        return load_config(ref)
    if ref.lstrip().startswith("{"):
        return parse_config(ref)
    if ref.upper() in ("S", "B", "L"):
        return build_variant(ref)
    raise UsageError(f"config {ref!r} is not a file, inline JSON, or one of S, B, L")


def _write(path: str, text: str) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(text, encoding="utf-8")


# --------------------------------------------------------------------------
# subcommands


def cmd_describe(args, out) -> int:
    from .analysis import count_flops

    spec = load_model_config(args.config)
    report = count_flops(spec, args.size)
    print(f"# {spec.name} depths={spec.depths} classes={spec.num_classes}", file=out)
    print(report.table(), file=out)
    if args.csv:
        _write(args.csv, report.to_csv())
    if args.plot:
        from .plotting import plot_costs

        print(f"# figure {plot_costs(report, args.plot, spec.name)}", file=out)
    return EXIT_OK


def cmd_infer(args, out) -> int:
    from .weights import load_tensor, load_weights

    spec = load_model_config(args.config)
    params = load_weights(args.weights)
    validate_params(spec, params)
    x = load_tensor(args.input)
    if args.trace:
        for name, shape in shape_trace(spec, params, x):
            print(f"# {name} {tuple(shape)}", file=out)
    logits = forward(spec, params, x).data
    print("sample,argmax," + ",".join(f"logit_{j}" for j in range(logits.shape[1])), file=out)
    for i, row in enumerate(logits):
        print(f"{i},{int(row.argmax())}," + ",".join(f"{v:.6g}" for v in row), file=out)
    return EXIT_OK


def cmd_bench(args, out) -> int:
    from .bench import bench_run

    spec = load_model_config(args.config)
    if args.weights:
        from .weights import load_weights

        params = load_weights(args.weights)
        validate_params(spec, params)
    else:
        params = init_params(spec, args.seed)
    report = bench_run(
        spec, params, args.batch, args.size, args.warmup, args.iters,
        per_block=args.per_block, threads=args.threads, conv_method=args.conv,
    )
    text = report.to_csv()
    out.write(text)
    if args.csv:
        _write(args.csv, text)
    if args.plot:
        from .plotting import plot_bench

        print(f"# figure {plot_bench(report, args.plot)}", file=out)
    return EXIT_OK


def cmd_gradcheck(args, out) -> int:
    from .checks import run_gradient_suite

    reports = run_gradient_suite(args.max_size, emit=lambda line: print(line, file=out, flush=True))
    failed = [r.name for r in reports if not r.passed]
    print(f"# {len(reports) - len(failed)}/{len(reports)} gradient checks passed", file=out)
    return EXIT_CHECK if failed else EXIT_OK


def cmd_fold(args, out) -> int:
    from .analysis import check_equivalence, count_bn_nodes, fold_batchnorm
    from .config import render_config
    from .weights import load_weights, save_weights

    spec = load_model_config(args.config)
    params = load_weights(args.weights)
    validate_params(spec, params)
    fspec, fparams = fold_batchnorm(spec, params)
    save_weights(fparams, args.out)
    config_path = args.config_out or str(Path(args.out).with_suffix(".json"))
    _write(config_path, render_config(fspec))
    report = check_equivalence(spec, params, fspec, fparams, n_samples=args.samples, seed=args.seed,
                               tol=args.tol, input_size=args.size)
    print(f"# weights {args.out}", file=out)
    print(f"# config {config_path}", file=out)
    print(f"# bn_nodes before={count_bn_nodes(spec)} after={count_bn_nodes(fspec)}", file=out)
    print(report.summary(), file=out)
    return EXIT_OK if report.passed else EXIT_CHECK


def cmd_selftest(args, out) -> int:
    from .checks import run_selftest

    results = run_selftest(emit=lambda line: print(line, file=out, flush=True))
    failed = [r for r in results if not r.passed]
    print(f"# {len(results) - len(failed)}/{len(results)} oracle checks passed", file=out)
    return EXIT_CHECK if failed else EXIT_OK


def cmd_init(args, out) -> int:
    from .analysis import random_inputs, trained_like_params
    from .weights import save_weights

    spec = load_model_config(args.config)
    params = init_params(spec, args.seed)
    if args.calibrate:
        x = random_inputs(args.calibrate, args.seed + 1, args.size)
        params = trained_like_params(spec, params, x, args.seed + 2)
    save_weights(params, args.out)
    print(f"# wrote {len(params)} tensors to {args.out}", file=out)
    return EXIT_OK


def cmd_make_input(args, out) -> int:
    from .tensor import make_rng
    from .weights import save_tensor

    x = make_rng(args.seed).standard_normal((args.batch, 3, *args.size)).astype(np.float32)
    save_tensor(x, args.out)
    print(f"# wrote input {x.shape} to {args.out}", file=out)
    return EXIT_OK


def cmd_render(args, out) -> int:
    from .config import render_config

    out.write(render_config(load_model_config(args.config)))
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nextvit", description="Next-ViT CPU inference and verification engine.")
    sub = p.add_subparsers(dest="command", required=True, metavar="command")
    cfg_help = "config file, inline JSON, or preset S/B/L"

    d = sub.add_parser("describe", help="parameter and FLOP table")
    d.add_argument("config", help=cfg_help)
    d.add_argument("--size", type=_size, default=(224, 224), help="input HxW (default 224x224)")
    d.add_argument("--csv", help="also write per-module costs as CSV")
    d.add_argument("--plot", help="write a per-stage cost figure (png/svg/pdf)")
    d.set_defaults(func=cmd_describe)

    i = sub.add_parser("infer", help="print logits for a stored input tensor")
    i.add_argument("config", help=cfg_help)
    i.add_argument("weights")
    i.add_argument("input", help="tensor file with an entry named 'input'")
    i.add_argument("--trace", action="store_true", help="print per-stage output shapes")
    i.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="latency microbenchmark")
    b.add_argument("config", help=cfg_help)
    b.add_argument("--weights", help="weights file (default: seeded random init)")
    b.add_argument("--batch", type=_positive, default=1)
    b.add_argument("--size", type=_size, default=(224, 224))
    b.add_argument("--warmup", type=_non_negative, default=10)
    b.add_argument("--iters", type=_positive, default=50)
    b.add_argument("--threads", type=_positive, default=1, help="BLAS worker count (default 1)")
    b.add_argument("--conv", choices=("direct", "im2col"), default=None, help="conv2d strategy")
    b.add_argument("--per-block", action="store_true", help="one row per stem/block/head")
    b.add_argument("--csv", help="also write the report to this path")
    b.add_argument("--plot", help="write a latency figure")
    b.add_argument("--seed", type=int, default=0)
    b.set_defaults(func=cmd_bench)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--max-size", type=_positive, default=8, help="largest spatial side used (default 8)")
    g.set_defaults(func=cmd_gradcheck)

    f = sub.add_parser("fold", help="fold BatchNorm into convs and certify equivalence")
    f.add_argument("config", help=cfg_help)
    f.add_argument("weights")
    f.add_argument("--out", required=True, help="folded weights path")
    f.add_argument("--config-out", help="folded config path (default: --out with .json suffix)")
    f.add_argument("--samples", type=_positive, default=16)
    f.add_argument("--size", type=_size, default=(224, 224))
    f.add_argument("--tol", type=float, default=5e-3)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_fold)

    s = sub.add_parser("selftest", help="oracle-equivalence suite")
    s.set_defaults(func=cmd_selftest)

    n = sub.add_parser("init", help="write seeded random weights")
    n.add_argument("config", help=cfg_help)
    n.add_argument("--out", required=True)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--calibrate", type=_non_negative, default=0, metavar="N",
                   help="jitter norm affines, then set BN statistics from N random images")
    n.add_argument("--size", type=_size, default=(224, 224))
    n.set_defaults(func=cmd_init)

    m = sub.add_parser("make-input", help="write a seeded random input tensor file")
    m.add_argument("--out", required=True)
    m.add_argument("--batch", type=_positive, default=1)
    m.add_argument("--size", type=_size, default=(224, 224))
    m.add_argument("--seed", type=int, default=0)
    m.set_defaults(func=cmd_make_input)

    r = sub.add_parser("render", help="print the canonical config document")
    r.add_argument("config", help=cfg_help)
    r.set_defaults(func=cmd_render)
    return p


def main(argv: Sequence[str] | None = None, out=None) -> int:
    out = out or sys.stdout
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    try:
        return args.func(args, out)
    except (UsageError, NextViTError, OSError, KeyError, ValueError, json.JSONDecodeError) as e:
        print(f"nextvit {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
