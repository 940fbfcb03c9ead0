import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nextvit import checks
from nextvit.blocks import (
    EMHSASpec,
    MHCASpec,
    NCBSpec,
    NTBSpec,
    attention_impl,
    block_decls,
    emhsa_attention_weights,
    emhsa_decls,
    emhsa_forward,
    emhsa_qkv,
    init_block_params,
    mhca_decls,
    mhca_forward,
    mhca_grouped_stage,
    ncb_forward,
    ntb_forward,
    split_channels,
)
from nextvit.errors import HeadMismatch, InvalidRatio, ShapeMismatch
from nextvit.params import init_from_decls
from nextvit.tensor import make_rng

TABLE_WIDTHS = (96, 192, 256, 384, 512, 768, 1024)
RATIOS = (0.0, 0.25, 0.5, 0.75, 1.0)


def _x(seed, *shape):
    return make_rng(seed).standard_normal(shape).astype(np.float32)


def _zeroed(params):
    """Zero every weight and affine; BN statistics stay at mean 0, var 1."""
    return {k: (v if k.endswith("running_var") else np.zeros_like(v)) for k, v in params.items()}


class TestMHCA:
    def test_single_head_matches_dense_conv_oracle(self):
        r = checks.check_mhca_single_head()
        assert r.error < 1e-6, r.line()

    def test_zero_weights_give_final_beta(self):
        spec = MHCASpec(64)
        p = _zeroed(init_from_decls(mhca_decls(spec), make_rng(0)))
        p["proj.norm.bias"] = np.linspace(-1, 1, 64).astype(np.float32)
        out = mhca_forward(_x(1, 1, 64, 5, 5), spec, p).data
        assert np.array_equal(out, np.broadcast_to(p["proj.norm.bias"][None, :, None, None], out.shape))

    def test_heads_are_local_before_projection(self):
        spec = MHCASpec(64, head_dim=32)
        p = init_from_decls(mhca_decls(spec), make_rng(2))
        x = _x(3, 1, 64, 7, 7)
        x2 = x.copy()
        x2[:, 40] += 5.0
        a, b = mhca_grouped_stage(x, spec, p).data, mhca_grouped_stage(x2, spec, p).data
        assert np.array_equal(a[:, :32], b[:, :32])
        assert not np.array_equal(a[:, 32:], b[:, 32:])

    def test_shape_preserved_and_errors(self):
        spec = MHCASpec(32, head_dim=8)
        p = init_from_decls(mhca_decls(spec), make_rng(0))
        assert mhca_forward(_x(0, 2, 32, 5, 3), spec, p).shape == (2, 32, 5, 3)
        with pytest.raises(ShapeMismatch):
            mhca_forward(_x(0, 1, 16, 5, 5), spec, p)
        with pytest.raises(HeadMismatch):
            MHCASpec(48, head_dim=32)


class TestNCB:
    def test_zero_mixer_is_pass_through(self):
        spec = NCBSpec.make(32, 32)
        p = _zeroed(init_block_params(spec, 0))
        x = _x(1, 1, 32, 6, 6)
        assert np.array_equal(ncb_forward(x, spec, p).data, x)

    def test_stage1_shape(self):
        spec = NCBSpec.make(96, 96)
        p = init_block_params(spec, 0)
        assert ncb_forward(_x(0, 1, 96, 56, 56), spec, p).shape == (1, 96, 56, 56)

    def test_adapter_only_when_widths_differ(self):
        assert not any(k.startswith("adapter") for k in block_decls(NCBSpec.make(64, 64)))
        decls = block_decls(NCBSpec.make(512, 384))
        assert decls["adapter.conv.weight"].shape == (384, 512, 1, 1)
        spec = NCBSpec.make(16, 32, head_dim=8)
        assert ncb_forward(_x(0, 1, 16, 4, 4), spec, init_block_params(spec, 0)).shape == (1, 32, 4, 4)

    def test_mlp_hidden_width(self):
        assert NCBSpec.make(96, 96).hidden == 288
        assert NTBSpec.make(256, 256, head_dim=32).hidden == 512

    def test_gradient_matches_finite_differences(self):
        spec = NCBSpec.make(32, 32, head_dim=8)
        assert checks._block_grad("ncb", spec, 5, 4).max_rel_err < 1e-3


class TestEMHSA:
    def test_sr1_matches_bruteforce(self):
        for grid in (1, 3, 8):
            r = checks.check_emhsa_bruteforce(seed=grid, grid=grid)
            assert r.error < 1e-5, r.line()

    def test_reference_path_equals_fast_path(self):
        spec = EMHSASpec(32, head_dim=8, sr_ratio=2)
        p = init_from_decls(emhsa_decls(spec), make_rng(0))
        x = _x(1, 1, 32, 6, 5)
        fast = emhsa_forward(x, spec, p).data
        with attention_impl("reference"):
            ref = emhsa_forward(x, spec, p).data
        assert np.max(np.abs(fast - ref)) < 1e-5

    def test_single_token_is_value_projection_path(self):
        spec = EMHSASpec(64, head_dim=32, sr_ratio=4)
        p = init_from_decls(emhsa_decls(spec), make_rng(3))
        p["v.bias"] = make_rng(4).normal(size=64).astype(np.float32)
        x = _x(5, 1, 64, 1, 1)
        w = emhsa_attention_weights(x, spec, p).data
        assert w.shape == (1, 2, 1, 1) and np.all(w == 1.0)
        bn = x[0, :, 0, 0] / np.sqrt(1 + 1e-5)
        v = p["v.weight"] @ bn + p["v.bias"]
        expected = p["proj.weight"] @ v + p["proj.bias"]
        assert np.allclose(emhsa_forward(x, spec, p).data[0, :, 0, 0], expected, atol=1e-5)

    def test_stage4_rows_sum_to_one(self):
        spec = EMHSASpec(768, head_dim=32, sr_ratio=1)
        p = init_from_decls(emhsa_decls(spec), make_rng(0))
        w = emhsa_attention_weights(_x(1, 1, 768, 7, 7), spec, p).data
        assert w.shape == (1, 24, 49, 49)
        assert np.allclose(w.sum(-1), 1.0, atol=1e-6)

    @given(st.integers(1, 9), st.integers(1, 9), st.sampled_from([1, 2, 4, 8]))
    def test_key_token_count(self, h, w, s):
        spec = EMHSASpec(16, head_dim=8, sr_ratio=s)
        p = init_from_decls(emhsa_decls(spec), make_rng(0))
        q, k, v = emhsa_qkv(_x(0, 1, 16, h, w), spec, p)
        m = math.ceil(h / s) * math.ceil(w / s)
        assert q.shape == (1, 2, h * w, 8)
        assert k.shape == v.shape == (1, 2, m, 8)

    def test_scale_modes(self):
        assert EMHSASpec(64, 32, 1).scale == pytest.approx(1 / math.sqrt(32))
        assert EMHSASpec(64, 32, 1, scale_mode="linear").scale == pytest.approx(1 / 32)
        with pytest.raises(ValueError):
            EMHSASpec(64, 32, 1, scale_mode="cubic")


class TestSplit:
    @pytest.mark.parametrize(
        "out,r,expected",
        [(256, 0.75, (192, 64)), (512, 0.75, (384, 128)), (1024, 0.75, (768, 256)),
         (256, 0.5, (128, 128)), (256, 0.25, (64, 192)), (256, 0.0, (0, 256)), (256, 1.0, (256, 0))],
    )
    def test_table_widths(self, out, r, expected):
        assert split_channels(out, r, 32) == expected

    def test_snaps_to_head_multiple_with_ties_up(self):
        assert split_channels(64, 0.75, 32) == (64, 0)  # 48 is equidistant from 32 and 64
        assert split_channels(96, 0.75, 32) == (64, 32)  # 72 → nearest multiple 64

    @given(st.sampled_from(TABLE_WIDTHS), st.sampled_from(RATIOS))
    def test_widths_always_sum(self, out, r):
        hi, lo = split_channels(out, r, 32)
        assert hi + lo == out and hi % 32 == 0 and lo % 32 == 0

    def test_errors(self):
        with pytest.raises(InvalidRatio):
            split_channels(256, 1.5, 32)
        with pytest.raises(InvalidRatio):
            split_channels(100, 0.5, 32)


class TestNTB:
    def test_stage2_widths_and_shape(self):
        spec = NTBSpec.make(192, 256, shrink_ratio=0.75, sr_ratio=4)
        assert (spec.c_hi, spec.c_lo) == (192, 64)
        out = ntb_forward(_x(0, 1, 192, 28, 28), spec, init_block_params(spec, 0))
        assert out.shape == (1, 256, 28, 28)
        assert "proj_hi.conv.weight" not in block_decls(spec)

    def test_r1_zero_weights_pass_through(self):
        spec = NTBSpec.make(64, 64, shrink_ratio=1.0, sr_ratio=2)
        assert spec.mhca is None
        p = _zeroed(init_block_params(spec, 0))
        x = _x(1, 1, 64, 4, 4)
        assert np.array_equal(ntb_forward(x, spec, p).data, x)

    def test_r1_projection_is_the_residual_base(self):
        spec = NTBSpec.make(32, 64, shrink_ratio=1.0, sr_ratio=2)
        p = _zeroed(init_block_params(spec, 0))
        p["proj_hi.norm.bias"] = np.arange(64, dtype=np.float32)
        out = ntb_forward(_x(1, 1, 32, 4, 4), spec, p).data
        assert np.array_equal(out, np.broadcast_to(p["proj_hi.norm.bias"][None, :, None, None], out.shape))

    @pytest.mark.parametrize("r", RATIOS)
    def test_ratio_grid(self, r):
        spec = NTBSpec.make(64, 128, shrink_ratio=r, sr_ratio=2)
        decls = block_decls(spec)
        assert spec.c_hi + spec.c_lo == 128
        assert (r == 0) == (spec.emhsa is None) == (not any(k.startswith("emhsa.") for k in decls))
        assert (r == 1) == (spec.mhca is None) == (not any(k.startswith("mhca.") for k in decls))
        assert ntb_forward(_x(0, 1, 64, 4, 4), spec, init_block_params(spec, 1)).shape == (1, 128, 4, 4)

    def test_ln_gelu_changes_values_not_shapes(self):
        base = NTBSpec.make(32, 32, head_dim=8, sr_ratio=2)
        alt = NTBSpec.make(32, 32, head_dim=8, sr_ratio=2, norm="ln", act="gelu")
        x = _x(0, 1, 32, 4, 4)
        a = ntb_forward(x, base, init_block_params(base, 0)).data
        b = ntb_forward(x, alt, init_block_params(alt, 0)).data
        assert a.shape == b.shape and not np.allclose(a, b)

    def test_gradient_matches_finite_differences(self):
        spec = NTBSpec.make(32, 32, shrink_ratio=0.75, sr_ratio=2, head_dim=8)
        assert spec.emhsa and spec.mhca
        assert checks._block_grad("ntb", spec, 6, 4).max_rel_err < 1e-3

    def test_wrong_input_channels(self):
        spec = NTBSpec.make(32, 32, head_dim=8)
        with pytest.raises(ShapeMismatch):
            ntb_forward(_x(0, 1, 16, 4, 4), spec, init_block_params(spec, 0))


@given(st.integers(1, 6), st.integers(1, 6), st.sampled_from(["ncb", "ntb"]))
def test_blocks_preserve_spatial_dims(h, w, kind):
    spec = NCBSpec.make(16, 16, head_dim=8) if kind == "ncb" else NTBSpec.make(16, 32, head_dim=8, sr_ratio=4)
    fwd = ncb_forward if kind == "ncb" else ntb_forward
    out = fwd(_x(0, 2, 16, h, w), spec, init_block_params(spec, 0))
    assert out.shape == (2, spec.out_channels, h, w)
