"""Model assembly: stem, patch embeddings, NHS-stacked stages and the classifier head.

A :class:`ModelSpec` is the single description consumed by forward, cost
counting, folding, configuration rendering and benchmarking.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from . import ops
from .blocks import (
    ACTS,
    NORMS,
    SCALE_MODES,
    BlockSpec,
    NCBSpec,
    NTBSpec,
    activate,
    block_decls,
    block_forward,
    conv_norm,
    conv_norm_decls,
)
from .errors import InvalidPattern, ShapeMismatch
from .params import BIAS, LINEAR, ParamDecl, ParamSet, init_from_decls, scope
from .tensor import Tensor, as_tensor, make_rng

STEM = ((64, 2), (32, 1), (64, 1), (64, 2))
STAGE_WIDTHS = ((96, 96), (192, 256), (384, 512), (768, 1024))
VARIANT_GROUPS = {"S": 2, "B": 4, "L": 6}

# A layout entry is (block kind, width, count); the stage repeats its layout `repeats` times.
LayoutEntry = tuple[str, int, int]


@dataclass(frozen=True)
class PatchEmbedSpec:
    downsample: bool
    out_channels: int


@dataclass(frozen=True)
class StageSpec:
    patch_embed: PatchEmbedSpec
    layout: tuple[LayoutEntry, ...]
    repeats: int
    sr_ratio: int
    blocks: tuple[BlockSpec, ...] = field(compare=False, default=())

    @property
    def out_channels(self) -> int:
        return self.blocks[-1].out_channels if self.blocks else self.patch_embed.out_channels

    @property
    def ntb_count(self) -> int:
        return sum(isinstance(b, NTBSpec) for b in self.blocks)


@dataclass(frozen=True)
class ModelSpec:
    stages: tuple[StageSpec, ...]
    num_classes: int = 1000
    norm: str = "bn"
    act: str = "relu"
    attn_scale_mode: str = "sqrt"
    shrink_ratio: float = 0.75
    head_dim: int = 32
    mlp_ratios: tuple[float, float] = (3.0, 2.0)
    sr_ratios: tuple[int, ...] = (8, 4, 2, 1)
    stem: tuple[tuple[int, int], ...] = STEM
    name: str = field(default="custom", compare=False)

    @property
    def depths(self) -> list[int]:
        return [len(s.blocks) for s in self.stages]

    @property
    def head_in(self) -> int:
        return self.stages[-1].out_channels

    def with_options(self, **changes) -> "ModelSpec":
        """Copy with hyper-parameters changed; blocks are re-derived."""
        base = replace(self, **changes)
        return assemble(base.stages, **_hyper(base))


def _hyper(spec: ModelSpec) -> dict:
    return dict(
        num_classes=spec.num_classes,
        norm=spec.norm,
        act=spec.act,
        attn_scale_mode=spec.attn_scale_mode,
        shrink_ratio=spec.shrink_ratio,
        head_dim=spec.head_dim,
        mlp_ratios=spec.mlp_ratios,
        sr_ratios=spec.sr_ratios,
        stem=spec.stem,
        name=spec.name,
    )


def _expand(stage: StageSpec, in_channels: int, hp: dict) -> tuple[BlockSpec, ...]:
    blocks: list[BlockSpec] = []
    c = in_channels
    for _ in range(stage.repeats):
        for kind, width, count in stage.layout:
            for _ in range(count):
                if kind == "NCB":
                    b = NCBSpec.make(
                        c, width, head_dim=hp["head_dim"], norm=hp["norm"], act=hp["act"],
                        mlp_ratio=hp["mlp_ratios"][0],
                    )
                else:
                    b = NTBSpec.make(
                        c, width, shrink_ratio=hp["shrink_ratio"], sr_ratio=stage.sr_ratio,
                        head_dim=hp["head_dim"], norm=hp["norm"], act=hp["act"],
                        mlp_ratio=hp["mlp_ratios"][1], scale_mode=hp["attn_scale_mode"],
                    )
                blocks.append(b)
                c = width
    return tuple(blocks)


def assemble(stages: Sequence[StageSpec], **hyper) -> ModelSpec:
    """Resolve every stage's block list from its layout and the model hyper-parameters."""
    hp = dict(
        num_classes=1000, norm="bn", act="relu", attn_scale_mode="sqrt", shrink_ratio=0.75,
        head_dim=32, mlp_ratios=(3.0, 2.0), sr_ratios=(8, 4, 2, 1), stem=STEM, name="custom",
    )
    hp.update(hyper)
    hp["mlp_ratios"] = tuple(float(r) for r in hp["mlp_ratios"])
    hp["sr_ratios"] = tuple(int(s) for s in hp["sr_ratios"])
    hp["stem"] = tuple(tuple(s) for s in hp["stem"])
    if hp["norm"] not in NORMS or hp["act"] not in ACTS or hp["attn_scale_mode"] not in SCALE_MODES:
        raise ValueError(f"invalid norm/act/scale choice: {hp['norm']}, {hp['act']}, {hp['attn_scale_mode']}")
    if len(hp["sr_ratios"]) != len(stages):
        raise ValueError(f"need {len(stages)} sr_ratios, got {len(hp['sr_ratios'])}")
    if hp["num_classes"] < 1:
        raise ValueError("num_classes must be positive")
    resolved = []
    for i, st in enumerate(stages):
        for kind, width, count in st.layout:
            if kind not in ("NCB", "NTB") or width < 1 or count < 1:
                raise InvalidPattern(f"bad layout entry {(kind, width, count)} in stage {i + 1}")
        if st.repeats < 1:
            raise InvalidPattern(f"stage {i + 1} repeats must be >= 1")
        st = replace(st, sr_ratio=hp["sr_ratios"][i])
        blocks = _expand(st, st.patch_embed.out_channels, hp)
        resolved.append(replace(st, blocks=blocks))
    return ModelSpec(stages=tuple(resolved), **hp)


def _stage(downsample, embed, layout, repeats=1, sr=1) -> StageSpec:
    return StageSpec(PatchEmbedSpec(downsample, embed), tuple(layout), repeats, sr)


def build_variant(name: str, num_classes: int = 1000, **hyper) -> ModelSpec:
    """Next-ViT-S/B/L; they differ only in how often stage 3 repeats (NCB×4 + NTB×1)."""
    name = name.upper()
    if name not in VARIANT_GROUPS:
        raise ValueError(f"unknown variant {name!r}; expected S, B or L")
    stages = [
        _stage(False, 96, [("NCB", 96, 3)]),
        _stage(True, 192, [("NCB", 192, 3), ("NTB", 256, 1)]),
        _stage(True, 384, [("NCB", 384, 4), ("NTB", 512, 1)], VARIANT_GROUPS[name]),
        _stage(True, 768, [("NCB", 768, 2), ("NTB", 1024, 1)]),
    ]
    hyper.setdefault("name", f"Next-ViT-{name}")
    return assemble(stages, num_classes=num_classes, **hyper)


@dataclass(frozen=True)
class HybridPattern:
    """Per-stage strategy letters: C (NCB only), T (NTB only), H ((NCB×N + NTB×1)×L)."""

    letters: tuple[str, ...]
    n: tuple[int, ...] = (3, 3, 4, 2)
    l: tuple[int, ...] = (1, 1, 2, 1)

    @classmethod
    def parse(cls, text: str, n=None, l=None) -> "HybridPattern":
        tokens = re.findall(r"[A-Za-z]", re.sub(r"_\{?N\}?", "", text))
        letters = tuple(t.upper() for t in tokens)
        kw = {}
        if n is not None:
            kw["n"] = _per_stage(n, len(letters), "N")
        if l is not None:
            kw["l"] = _per_stage(l, len(letters), "L")
        return cls(letters, **kw)

    def __post_init__(self):
        if len(self.letters) != 4:
            raise InvalidPattern(f"pattern needs 4 stage letters, got {len(self.letters)}")
        bad = [c for c in self.letters if c not in "CTH"]
        if bad:
            raise InvalidPattern(f"invalid pattern letters {bad}; use C, T or H")
        if len(self.n) != 4 or len(self.l) != 4 or min(self.n) < 0 or min(self.l) < 1:
            raise InvalidPattern("N must be >= 0 and L >= 1 for each of the 4 stages")

    def __str__(self):
        return " ".join(self.letters)


def _per_stage(v, k, what) -> tuple[int, ...]:
    if isinstance(v, int):
        return (v,) * k
    v = tuple(int(x) for x in v)
    if len(v) != k:
        raise InvalidPattern(f"{what} needs {k} entries, got {len(v)}")
    return v


def build_hybrid(
    pattern,
    channels: Sequence = STAGE_WIDTHS,
    depths: Sequence[int] = (3, 4, 10, 3),
    num_classes: int = 1000,
    **hyper,
) -> ModelSpec:
    """Model for a lettered hybrid strategy.

    ``channels`` holds per-stage (NCB width, NTB width) pairs or a single width;
    ``depths`` sets the block count of C and T stages.  H stages take N and L
    from the pattern and always end each group with the NTB.
    """
    if isinstance(pattern, str):
        pattern = HybridPattern.parse(pattern)
    if len(channels) != 4 or len(depths) != 4:
        raise InvalidPattern("channels and depths need one entry per stage")
    if min(depths) < 1:
        raise InvalidPattern("depths must be >= 1")
    stages = []
    for i, letter in enumerate(pattern.letters):
        ch = channels[i]
        conv_w, trans_w = (ch, ch) if isinstance(ch, int) else ch
        if letter == "C":
            layout, reps = [("NCB", conv_w, depths[i])], 1
        elif letter == "T":
            layout, reps = [("NTB", trans_w, depths[i])], 1
        else:
            layout = [("NCB", conv_w, pattern.n[i])] if pattern.n[i] else []
            layout.append(("NTB", trans_w, 1))
            reps = pattern.l[i]
        stages.append(_stage(i > 0, conv_w, layout, reps))
    hyper.setdefault("name", f"hybrid[{pattern}]")
    return assemble(stages, num_classes=num_classes, **hyper)


# --------------------------------------------------------------------------
# parameters


def param_decls(spec: ModelSpec) -> dict[str, ParamDecl]:
    d: dict[str, ParamDecl] = {}
    c = 3
    for i, (cout, _) in enumerate(spec.stem):
        d.update(conv_norm_decls(f"stem.{i}", c, cout, 3, spec.norm))
        c = cout
    for si, st in enumerate(spec.stages):
        d.update(conv_norm_decls(f"stages.{si}.embed", c, st.patch_embed.out_channels, 1, spec.norm))
        for bi, b in enumerate(st.blocks):
            d.update(block_decls(b, f"stages.{si}.blocks.{bi}."))
        c = st.out_channels
    d["head.weight"] = ParamDecl((spec.num_classes, c), LINEAR)
    d["head.bias"] = ParamDecl((spec.num_classes,), BIAS)
    return d


def init_params(spec: ModelSpec, seed: int = 0) -> ParamSet:
    """Deterministic initialisation; the same seed gives a bitwise-identical ParamSet."""
    return init_from_decls(param_decls(spec), make_rng(seed))


def node_kinds(spec: ModelSpec) -> dict[str, str]:
    """Graph nodes of interest keyed by path: bn, ln, conv, emhsa, mhca, ntb, ncb."""
    nodes: dict[str, str] = {}
    for key, decl in param_decls(spec).items():
        if key.endswith(".conv.weight"):
            nodes[key[: -len(".weight")]] = "conv"
        elif key.endswith(".running_var"):
            nodes[key[: -len(".running_var")]] = "bn"
        elif key.endswith(".norm.weight"):
            nodes.setdefault(key[: -len(".weight")], "ln")
    for si, st in enumerate(spec.stages):
        for bi, b in enumerate(st.blocks):
            path = f"stages.{si}.blocks.{bi}"
            if isinstance(b, NCBSpec):
                nodes[path] = "ncb"
                nodes[f"{path}.mhca"] = "mhca"
            else:
                nodes[path] = "ntb"
                if b.emhsa:
                    nodes[f"{path}.emhsa"] = "emhsa"
                if b.mhca:
                    nodes[f"{path}.mhca"] = "mhca"
    return nodes


def validate_params(spec: ModelSpec, params: Mapping) -> None:
    decls = param_decls(spec)
    missing = [k for k in decls if k not in params]
    if missing:
        raise ShapeMismatch(f"{len(missing)} parameters missing, e.g. {missing[:3]}")
    for k, decl in decls.items():
        if tuple(np.shape(params[k])) != decl.shape:
            raise ShapeMismatch(f"parameter {k} has shape {np.shape(params[k])}, expected {decl.shape}")
    extra = [k for k in params if k not in decls]
    if extra:
        raise ShapeMismatch(f"{len(extra)} unexpected parameters, e.g. {extra[:3]}")


# --------------------------------------------------------------------------
# forward

Hook = Callable[[str, str, Tensor], None]


def forward(spec: ModelSpec, params: Mapping, x, hook: Optional[Hook] = None) -> Tensor:
    """Logits ``(n, num_classes)`` for input ``(n, 3, H, W)`` with H and W divisible by 32.

    ``hook(kind, name, value)`` is called after the stem (kind ``"stem"``), after
    each block (``"block"``), at each stage output (``"stage"``) and after the
    head (``"head"``).  Patch embeddings run as part of the stage's first block
    for timing purposes.
    """
    x = as_tensor(x)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeMismatch(f"expected input (n, 3, H, W), got {x.shape}")
    if x.shape[2] % 32 or x.shape[3] % 32 or x.shape[2] == 0 or x.shape[3] == 0:
        raise ShapeMismatch(f"input spatial size {x.shape[2:]} must be a positive multiple of 32")
    emit = hook or (lambda kind, name, value: None)

    for i, (_, stride) in enumerate(spec.stem):
        x = activate(conv_norm(x, params, f"stem.{i}", spec.norm, stride=stride, padding=1), spec.act)
    emit("stem", "stem", x)
    for si, st in enumerate(spec.stages):
        if st.patch_embed.downsample:
            x = ops.avg_pool2d(x, 2, 2)
        x = conv_norm(x, params, f"stages.{si}.embed", spec.norm)
        for bi, b in enumerate(st.blocks):
            name = f"stages.{si}.blocks.{bi}"
            x = block_forward(x, b, scope(params, name))
            emit("block", name, x)
        emit("stage", f"stages.{si}", x)
    pooled = ops.global_avg_pool(x)
    logits = ops.linear(pooled, ops.LinearParams(params["head.weight"], params["head.bias"]))
    emit("head", "head", logits)
    return logits


def shape_trace(spec: ModelSpec, params: Mapping, x) -> list[tuple[str, tuple[int, ...]]]:
    """Output shape after the stem, each stage and the head."""
    trace: list[tuple[str, tuple[int, ...]]] = []

    def hook(kind, name, value):
        if kind != "block":
            trace.append((name, value.shape))

    forward(spec, params, x, hook)
    return trace


def stage_shapes(spec: ModelSpec, input_hw: tuple[int, int], batch: int = 1) -> list[tuple[int, ...]]:
    """Per-stage output shapes computed symbolically (no forward pass)."""
    h, w = input_hw
    for _, s in spec.stem:
        h, w = (h + 2 - 3) // s + 1, (w + 2 - 3) // s + 1
    out = []
    for st in spec.stages:
        if st.patch_embed.downsample:
            h, w = h // 2, w // 2
        out.append((batch, st.out_channels, h, w))
    return out
