import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nextvit.blocks import NCBSpec, NTBSpec
from nextvit.errors import InvalidPattern, ShapeMismatch
from nextvit.model import (
    HybridPattern,
    build_hybrid,
    build_variant,
    forward,
    init_params,
    node_kinds,
    param_decls,
    shape_trace,
    stage_shapes,
    validate_params,
)
from nextvit.params import checksum
from nextvit.tensor import make_rng
from nextvit.weights import to_bytes

STAGE_OUT = [(96, 56), (256, 28), (512, 14), (1024, 7)]


def _groups(blocks):
    """Split a stage's blocks into runs that each end with an NTB (trailing NCBs form the last run)."""
    runs, cur = [], []
    for b in blocks:
        cur.append(b)
        if isinstance(b, NTBSpec):
            runs.append(cur)
            cur = []
    if cur:
        runs.append(cur)
    return runs


@pytest.mark.parametrize("name,depths,ntbs", [
    ("S", [3, 4, 10, 3], [0, 1, 2, 1]),
    ("B", [3, 4, 20, 3], [0, 1, 4, 1]),
    ("L", [3, 4, 30, 3], [0, 1, 6, 1]),
])
def test_variant_depths(name, depths, ntbs):
    spec = build_variant(name)
    assert spec.depths == depths
    assert [s.ntb_count for s in spec.stages] == ntbs


@pytest.mark.parametrize("name", ["S", "B", "L"])
def test_stage_law_and_channel_trace(name):
    spec = build_variant(name)
    n_per_stage = (3, 3, 4, 2)
    for si, stage in enumerate(spec.stages):
        if si == 0:
            assert all(isinstance(b, NCBSpec) for b in stage.blocks)
            continue
        for run in _groups(stage.blocks):
            assert [isinstance(b, NTBSpec) for b in run] == [False] * n_per_stage[si] + [True]
    assert [st.patch_embed.out_channels for st in spec.stages] == [96, 192, 384, 768]
    assert [st.out_channels for st in spec.stages] == [96, 256, 512, 1024]
    chained = 64
    for stage in spec.stages:
        chained = stage.patch_embed.out_channels
        for b in stage.blocks:
            assert b.in_channels == chained
            chained = b.out_channels
    assert [st.sr_ratio for st in spec.stages] == [8, 4, 2, 1]
    ntb_sr = [b.emhsa.sr_ratio for st in spec.stages for b in st.blocks if isinstance(b, NTBSpec)]
    assert set(ntb_sr) <= {4, 2, 1}


def test_stem_and_head():
    spec = build_variant("S", num_classes=10)
    assert spec.stem == ((64, 2), (32, 1), (64, 1), (64, 2))
    d = param_decls(spec)
    assert d["head.weight"].shape == (10, 1024)
    assert d["stem.0.conv.weight"].shape == (64, 3, 3, 3)
    assert d["stem.3.conv.weight"].shape == (64, 64, 3, 3)


def test_unknown_variant():
    with pytest.raises(ValueError):
        build_variant("XL")


class TestHybrid:
    def test_all_conv(self):
        spec = build_hybrid("C C C C")
        assert sum(s.ntb_count for s in spec.stages) == 0

    def test_c_h_h_h(self):
        spec = build_hybrid(HybridPattern.parse("C H_N H_N H_N", n=(3, 3, 4, 2), l=(1, 1, 2, 1)))
        assert spec.stages[0].ntb_count == 0
        assert [s.ntb_count for s in spec.stages[1:]] == [1, 2, 1]
        for stage in spec.stages[1:]:
            for run in _groups(stage.blocks):
                assert isinstance(run[-1], NTBSpec) and sum(isinstance(b, NTBSpec) for b in run) == 1

    def test_h_h_h_h_puts_ntb_in_stage1(self):
        assert build_hybrid("H H H H").stages[0].ntb_count == 1

    def test_c_c_c_t(self):
        spec = build_hybrid("C C C T")
        assert [s.ntb_count for s in spec.stages] == [0, 0, 0, 3]
        assert all(isinstance(b, NTBSpec) for b in spec.stages[3].blocks)

    def test_variant_equals_its_pattern(self):
        pattern = HybridPattern.parse("C H H H", n=(3, 3, 4, 2), l=(1, 1, 2, 1))
        assert build_hybrid(pattern, depths=(3, 4, 10, 3)) == build_variant("S")

    @pytest.mark.parametrize("bad", ["C C X C", "C C C", "C C C C C", ""])
    def test_invalid_patterns(self, bad):
        with pytest.raises(InvalidPattern):
            build_hybrid(bad)

    def test_invalid_depths(self):
        with pytest.raises(InvalidPattern):
            build_hybrid("C C C C", depths=(1, 0, 1, 1))

    @given(st.lists(st.sampled_from("CTH"), min_size=4, max_size=4),
           st.lists(st.integers(0, 3), min_size=4, max_size=4),
           st.lists(st.integers(1, 3), min_size=4, max_size=4))
    def test_pattern_expansion(self, letters, n, l):
        spec = build_hybrid(HybridPattern(tuple(letters), tuple(n), tuple(l)), depths=(2, 2, 2, 2))
        for letter, st_, ni, li in zip(letters, spec.stages, n, l):
            kinds = ["T" if isinstance(b, NTBSpec) else "C" for b in st_.blocks]
            if letter == "C":
                assert kinds == ["C", "C"]
            elif letter == "T":
                assert kinds == ["T", "T"]
            else:
                assert kinds == (["C"] * ni + ["T"]) * li


class TestParams:
    def test_same_seed_is_bitwise_identical(self, tiny):
        assert to_bytes(init_params(tiny, 7)) == to_bytes(init_params(tiny, 7))

    def test_different_seeds_differ(self, tiny):
        assert checksum(init_params(tiny, 1)) != checksum(init_params(tiny, 2))

    def test_norm_init_values(self, spec_s, params_s):
        for k, v in params_s.items():
            if k.endswith("norm.weight") or k.endswith("running_var"):
                assert np.all(v == 1.0), k
            elif k.endswith("norm.bias") or k.endswith("running_mean"):
                assert np.all(v == 0.0), k
        assert all(v.dtype == np.float32 for v in params_s.values())
        validate_params(spec_s, params_s)

    def test_validate_catches_problems(self, tiny):
        p = init_params(tiny)
        bad = dict(p)
        bad.pop("head.bias")
        with pytest.raises(ShapeMismatch):
            validate_params(tiny, bad)
        bad = dict(p, **{"head.bias": np.zeros(3, np.float32)})
        with pytest.raises(ShapeMismatch):
            validate_params(tiny, bad)
        with pytest.raises(ShapeMismatch):
            validate_params(tiny, dict(p, extra=np.zeros(1)))


class TestForward:
    @pytest.mark.slow
    def test_s_trace_at_224(self, spec_s, params_s):
        x = make_rng(0).standard_normal((1, 3, 224, 224)).astype(np.float32)
        trace = dict(shape_trace(spec_s, params_s, x))
        assert trace["stem"] == (1, 64, 56, 56)
        for i, (c, hw) in enumerate(STAGE_OUT):
            assert trace[f"stages.{i}"] == (1, c, hw, hw)
        assert trace["head"] == (1, 1000)

    def test_symbolic_shapes(self, spec_s):
        assert stage_shapes(spec_s, (224, 224)) == [(1, c, hw, hw) for c, hw in STAGE_OUT]
        assert stage_shapes(spec_s, (256, 256))[-1] == (1, 1024, 8, 8)

    def test_256_input_gives_8x8_stage4(self, tiny):
        p = init_params(tiny)
        trace = dict(shape_trace(tiny, p, np.zeros((1, 3, 256, 256), np.float32)))
        assert trace["stages.3"][2:] == (8, 8)

    def test_batch_invariance(self, tiny):
        p = init_params(tiny, 3)
        x = make_rng(4).standard_normal((2, 3, 64, 64)).astype(np.float32)
        both = forward(tiny, p, x).data
        single = np.concatenate([forward(tiny, p, x[i:i + 1]).data for i in range(2)])
        assert np.max(np.abs(both - single)) < 1e-5 * max(1.0, np.abs(both).max())

    def test_deterministic(self, tiny):
        x = make_rng(5).standard_normal((1, 3, 64, 64)).astype(np.float32)
        a = forward(tiny, init_params(tiny, 9), x).data
        b = forward(tiny, init_params(tiny, 9), x).data
        assert a.tobytes() == b.tobytes()

    @pytest.mark.parametrize("shape", [(1, 3, 100, 96), (1, 3, 0, 32), (1, 4, 64, 64), (3, 64, 64)])
    def test_bad_inputs(self, tiny, shape):
        with pytest.raises(ShapeMismatch):
            forward(tiny, init_params(tiny), np.zeros(shape, np.float32))

    def test_hook_order(self, tiny):
        events = []
        forward(tiny, init_params(tiny), np.zeros((1, 3, 32, 32), np.float32),
                hook=lambda kind, name, v: events.append((kind, name)))
        assert events[0] == ("stem", "stem") and events[-1] == ("head", "head")
        assert sum(k == "block" for k, _ in events) == sum(tiny.depths)
        assert [n for k, n in events if k == "stage"] == [f"stages.{i}" for i in range(4)]


def test_norm_act_variants_share_shape_trace(tiny):
    x = make_rng(0).standard_normal((1, 3, 64, 64)).astype(np.float32)
    traces = []
    for norm in ("bn", "ln"):
        for act in ("relu", "gelu"):
            spec = tiny.with_options(norm=norm, act=act)
            traces.append(shape_trace(spec, init_params(spec), x))
    assert all(t == traces[0] for t in traces)


def test_node_kinds_ratio_extremes():
    for r, absent in ((0.0, "emhsa"), (1.0, "mhca")):
        spec = build_variant("S", shrink_ratio=r)
        kinds = node_kinds(spec)
        ntb_paths = [p for p, k in kinds.items() if k == "ntb"]
        assert ntb_paths
        assert not any(kinds.get(f"{p}.{absent}") for p in ntb_paths)


def test_with_options_rederives_blocks(spec_s):
    half = spec_s.with_options(shrink_ratio=0.5)
    ntb = half.stages[1].blocks[-1]
    assert (ntb.c_hi, ntb.c_lo) == (128, 128)
    assert half.depths == spec_s.depths and half != spec_s
