"""Model configuration documents (JSON).

A document names either a preset ``variant`` (S, B, L), a lettered hybrid
``pattern``, or an explicit ``stages`` list, plus shared hyper-parameters::

    {"variant": "S", "num_classes": 1000, "shrink_ratio": 0.5}
    {"pattern": "C C C T"}
    {"pattern": {"letters": "C H H H", "N": 4, "L": [1, 1, 2, 1]}}

An optional ``stem`` list of ``[channels, stride]`` pairs replaces the
standard four-conv stem; it is only rendered when it differs from that.

:func:`render_config` always writes the explicit ``stages`` form; that output
is the canonical document and parses back to an equal spec.
"""
from __future__ import annotations

import json
import re
from typing import Any

from .errors import InvalidPattern, ParseError, UnknownKey
from .model import (
    STAGE_WIDTHS,
    STEM,
    HybridPattern,
    ModelSpec,
    PatchEmbedSpec,
    StageSpec,
    assemble,
    build_hybrid,
    build_variant,
)

TOP_KEYS = {
    "variant", "stages", "pattern", "num_classes", "norm_act", "attn_scale_mode",
    "shrink_ratio", "sr_ratios", "head_dim", "mlp_ratios", "stem",
}
PATTERN_KEYS = {"letters", "N", "L", "channels", "depths"}
STAGE_KEYS = {"downsample", "embed_channels", "blocks", "repeats"}

_NORM_NAMES = {"bn": "BN", "ln": "LN", "folded": "folded"}
_ACT_NAMES = {"relu": "ReLU", "gelu": "GELU"}


def _line_of(text: str, key: str) -> int | None:
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


class _Doc:
    def __init__(self, text: str):
        self.text = text

    def fail(self, message, key=None, cls=ParseError):
        raise cls(message, line=_line_of(self.text, key) if key else None, key=key)

    def int_(self, v, key, minimum=1) -> int:
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            self.fail(f"expected an integer >= {minimum}, got {v!r}", key)
        return v

    def num(self, v, key) -> float:
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            self.fail(f"expected a number, got {v!r}", key)
        return float(v)

    def int_list(self, v, key, length=None, minimum=1):
        if not isinstance(v, list) or (length is not None and len(v) != length):
            self.fail(f"expected a list of {length or 'some'} integers, got {v!r}", key)
        return [self.int_(x, key, minimum) for x in v]


def _hyper(doc: dict, d: _Doc) -> dict[str, Any]:
    hp: dict[str, Any] = {}
    if "num_classes" in doc:
        hp["num_classes"] = d.int_(doc["num_classes"], "num_classes")
    if "norm_act" in doc:
        v = doc["norm_act"]
        if isinstance(v, str):
            v = re.split(r"[/+, ]+", v.strip())
        if not isinstance(v, list) or len(v) != 2 or not all(isinstance(x, str) for x in v):
            d.fail('norm_act must be a pair like ["BN", "ReLU"]', "norm_act")
        norm, act = v[0].lower(), v[1].lower()
        if norm not in _NORM_NAMES or act not in _ACT_NAMES:
            d.fail(f"unknown norm/activation pair {v!r}", "norm_act")
        hp["norm"], hp["act"] = norm, act
    if "attn_scale_mode" in doc:
        if doc["attn_scale_mode"] not in ("sqrt", "linear"):
            d.fail("attn_scale_mode must be 'sqrt' or 'linear'", "attn_scale_mode")
        hp["attn_scale_mode"] = doc["attn_scale_mode"]
    if "shrink_ratio" in doc:
        r = d.num(doc["shrink_ratio"], "shrink_ratio")
        if not 0.0 <= r <= 1.0:
            d.fail("shrink_ratio must lie in [0, 1]", "shrink_ratio")
        hp["shrink_ratio"] = r
    if "sr_ratios" in doc:
        hp["sr_ratios"] = tuple(d.int_list(doc["sr_ratios"], "sr_ratios", 4))
    if "head_dim" in doc:
        hp["head_dim"] = d.int_(doc["head_dim"], "head_dim")
    if "mlp_ratios" in doc:
        v = doc["mlp_ratios"]
        if not isinstance(v, list) or len(v) != 2:
            d.fail("mlp_ratios must be [ncb_ratio, ntb_ratio]", "mlp_ratios")
        hp["mlp_ratios"] = tuple(d.num(x, "mlp_ratios") for x in v)
    if "stem" in doc:
        v = doc["stem"]
        if not isinstance(v, list) or not v or not all(isinstance(e, list) and len(e) == 2 for e in v):
            d.fail("stem must be a list of [channels, stride] pairs", "stem")
        hp["stem"] = tuple((d.int_(c, "stem"), d.int_(s, "stem")) for c, s in v)
    return hp


def _stages(raw, d: _Doc) -> list[StageSpec]:
    if not isinstance(raw, list) or len(raw) != 4:
        d.fail("stages must be a list of 4 stage objects", "stages")
    out = []
    for i, st in enumerate(raw):
        if not isinstance(st, dict):
            d.fail(f"stage {i + 1} must be an object", "stages")
        for k in st:
            if k not in STAGE_KEYS:
                d.fail(f"unknown stage key in stage {i + 1}", k, UnknownKey)
        for k in ("downsample", "embed_channels", "blocks"):
            if k not in st:
                d.fail(f"stage {i + 1} is missing {k!r}", "stages")
        if not isinstance(st["downsample"], bool):
            d.fail("downsample must be true or false", "downsample")
        layout = []
        if not isinstance(st["blocks"], list) or not st["blocks"]:
            d.fail(f"stage {i + 1} needs a non-empty blocks list", "blocks")
        for entry in st["blocks"]:
            if not (isinstance(entry, list) and len(entry) == 3 and entry[0] in ("NCB", "NTB")):
                d.fail(f'block entries look like ["NCB", width, count], got {entry!r}', "blocks")
            layout.append((entry[0], d.int_(entry[1], "blocks"), d.int_(entry[2], "blocks")))
        out.append(
            StageSpec(
                PatchEmbedSpec(st["downsample"], d.int_(st["embed_channels"], "embed_channels")),
                tuple(layout),
                d.int_(st.get("repeats", 1), "repeats"),
                1,
            )
        )
    return out


def _pattern(raw, d: _Doc, hp: dict) -> ModelSpec:
    if isinstance(raw, str):
        raw = {"letters": raw}
    if not isinstance(raw, dict) or "letters" not in raw:
        d.fail('pattern must be a string like "C H H H" or an object with "letters"', "pattern")
    for k in raw:
        if k not in PATTERN_KEYS:
            d.fail("unknown pattern key", k, UnknownKey)
    try:
        pattern = HybridPattern.parse(raw["letters"], raw.get("N"), raw.get("L"))
        channels = raw.get("channels", STAGE_WIDTHS)
        channels = [tuple(c) if isinstance(c, list) else c for c in channels]
        depths = raw.get("depths", (3, 4, 10, 3))
        return build_hybrid(pattern, channels, depths, **hp)
    except (InvalidPattern, TypeError) as e:
        d.fail(str(e), "pattern")


def parse_config(text: str) -> ModelSpec:
    """Parse a JSON configuration document into a :class:`ModelSpec`."""
    d = _Doc(text)
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ParseError(e.msg, line=e.lineno) from None
    if not isinstance(doc, dict):
        raise ParseError("configuration must be a JSON object", line=1)
    for k in doc:
        if k not in TOP_KEYS:
            d.fail("unknown configuration key", k, UnknownKey)
    sources = [k for k in ("variant", "stages", "pattern") if k in doc]
    if len(sources) != 1:
        d.fail(f"exactly one of variant, stages, pattern is required (got {sources or 'none'})", sources[1] if len(sources) > 1 else None)
    hp = _hyper(doc, d)
    try:
        if "variant" in doc:
            v = doc["variant"]
            if not isinstance(v, str) or v.upper() not in ("S", "B", "L"):
                d.fail("variant must be S, B or L", "variant")
            return build_variant(v, **hp)
        if "pattern" in doc:
            return _pattern(doc["pattern"], d, hp)
        return assemble(_stages(doc["stages"], d), **hp)
    except ParseError:
        raise
    except ValueError as e:
        raise ParseError(str(e)) from None


def load_config(path) -> ModelSpec:
    with open(path, encoding="utf-8") as f:
        return parse_config(f.read())


def render_config(spec: ModelSpec) -> str:
    """Canonical document for ``spec`` (explicit stages, every hyper-parameter)."""
    doc = {
        "num_classes": spec.num_classes,
        "norm_act": [_NORM_NAMES[spec.norm], _ACT_NAMES[spec.act]],
        "attn_scale_mode": spec.attn_scale_mode,
        "shrink_ratio": spec.shrink_ratio,
        "sr_ratios": list(spec.sr_ratios),
        "head_dim": spec.head_dim,
        "mlp_ratios": list(spec.mlp_ratios),
        **({"stem": [list(e) for e in spec.stem]} if spec.stem != STEM else {}),
        "stages": [
            {
                "downsample": st.patch_embed.downsample,
                "embed_channels": st.patch_embed.out_channels,
                "blocks": [list(e) for e in st.layout],
                "repeats": st.repeats,
            }
            for st in spec.stages
        ],
    }
    return json.dumps(doc, indent=2) + "\n"
