"""Fusion blocks: degeneracy reductions, cross-attention wiring, variants."""

import numpy as np
import pytest

from nunet.encoder import ModelConfig, ScaleFeature, window_attention
from nunet.errors import ConfigError
from nunet.fusion import (EnhancedFusion, FlScaleParams, LightFusion,
                          _cross_path, _init_concat_path, _init_cross_path,
                          build_fusion_variant, fe_add_path, fe_concat_path,
                          fe_mul_path, fuse_fe, fuse_fl)
from nunet.nn import iter_params, norm
from nunet.tensor import Tensor, grad_check


def feature(scale, stream, data):
    return ScaleFeature(scale_id=scale, stream=stream, tokens=Tensor(data))


def params_of(obj):
    return [t for _, t in iter_params(obj)]


def scaled(params_obj, factor=15.0):
    for name, t in iter_params(params_obj):
        if name.endswith("weight") or name.endswith("bias_table"):
            t.data *= factor
    return params_obj


class TestLightweightFusion:
    def test_zeroed_attention_reduces_to_sum(self):
        rng = np.random.default_rng(0)
        p = FlScaleParams.init(rng, 3, 1, 2)
        for _, t in iter_params(p.attn):
            t.data[:] = 0.0
        fr = rng.normal(size=(4, 4, 3))
        fd = rng.normal(size=(4, 4, 3))
        out = fuse_fl(feature(2, "R", fr), feature(2, "D", fd), p)
        assert out.scale_id == 2
        assert np.array_equal(out.tokens.data, fr + fd)

    def test_zero_depth_reduces_to_rgb_branch(self):
        rng = np.random.default_rng(1)
        p = scaled(FlScaleParams.init(rng, 3, 1, 2))
        fr = Tensor(rng.normal(size=(4, 4, 3)))
        out = fuse_fl(feature(1, "R", fr.data), feature(1, "D", np.zeros((4, 4, 3))), p)
        expected = fr + window_attention(norm(fr, p.pre_norm), None, p.attn, 2)
        assert np.array_equal(out.tokens.data, expected.data)

    @pytest.mark.parametrize("seed", range(10))
    def test_shape_preserved_at_every_scale(self, seed):
        rng = np.random.default_rng(100 + seed)
        cfg = ModelConfig.micro()
        fl = LightFusion("fl-full", rng, cfg)
        for s in range(1, 5):
            gh, gw = cfg.grid(s)
            c = cfg.embed_dims[s - 1]
            fr = feature(s, "R", rng.normal(size=(gh, gw, c)))
            fd = feature(s, "D", rng.normal(size=(gh, gw, c)))
            assert fl(fr, fd).tokens.shape == (gh, gw, c)

    def test_gradcheck_inputs_and_params(self):
        rng = np.random.default_rng(2)
        p = scaled(FlScaleParams.init(rng, 2, 1, 2))
        fr = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        fd = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4, 2)))

        def f():
            fused = fuse_fl(ScaleFeature(1, "R", fr), ScaleFeature(1, "D", fd), p)
            return (fused.tokens * w).sum()

        assert grad_check(f, [fr, fd] + params_of(p)) < 1e-3

    def test_variant_definitions(self):
        rng = np.random.default_rng(3)
        cfg = ModelConfig.micro()
        fr = feature(1, "R", rng.normal(size=(16, 16, 1)))
        fd = feature(1, "D", rng.normal(size=(16, 16, 1)))
        add_only = build_fusion_variant("fl-add-only", rng, cfg)
        assert np.array_equal(add_only(fr, fd).tokens.data,
                              fr.tokens.data + fd.tokens.data)
        mul = build_fusion_variant("fl-mul", rng, cfg)
        assert np.array_equal(mul(fr, fd).tokens.data,
                              fr.tokens.data * fd.tokens.data)
        wmsa_only = build_fusion_variant("fl-wmsa-only", rng, cfg)
        summed = fr.tokens + fd.tokens
        p = wmsa_only.scales[0]
        expected = window_attention(norm(summed, p.pre_norm), None, p.attn, p.window)
        assert np.array_equal(wmsa_only(fr, fd).tokens.data, expected.data)


class TestEnhancedPaths:
    GRID = (4, 4)

    def cross_params(self, rng, dim=2, with_sw=True):
        return scaled(_init_cross_path(rng, dim, 1, 2, 1, with_sw))

    def test_concat_shape_and_passthrough(self):
        rng = np.random.default_rng(4)
        p = _init_concat_path(rng, 4, 1, 2, 1, True)
        for _, t in iter_params(p):
            t.data[:] = 0.0
        fr = rng.normal(size=(4, 4, 2))
        fd = rng.normal(size=(4, 4, 2))
        out = fe_concat_path(Tensor(fr), Tensor(fd), p)
        assert out.shape == (4, 4, 4)
        assert np.array_equal(out.data, np.concatenate([fr, fd], axis=-1))

    def test_concat_gradcheck(self):
        rng = np.random.default_rng(5)
        p = scaled(_init_concat_path(rng, 4, 2, 2, 1, True))
        fr = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        fd = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4, 4)))
        assert grad_check(lambda: (fe_concat_path(fr, fd, p) * w).sum(),
                          [fr, fd] + params_of(p)) < 1e-3

    def test_mul_identity_depth_equals_add_zero_depth(self):
        # fD==1 makes the product query fR exactly; fD==0 does the same for
        # the additive query, so the two paths coincide given shared params
        rng = np.random.default_rng(6)
        p = self.cross_params(rng)
        fr = Tensor(rng.normal(size=(4, 4, 2)))
        out_mul = fe_mul_path(fr, Tensor(np.ones((4, 4, 2))), p)
        out_add = fe_add_path(fr, Tensor(np.zeros((4, 4, 2))), p)
        assert np.array_equal(out_mul.data, out_add.data)

    def test_add_zero_depth_query_is_ln_of_rgb(self):
        # independent recomposition of the whole path with the query source
        # pinned to fR; must match bit for bit when fD == 0
        rng = np.random.default_rng(7)
        p = self.cross_params(rng)
        fr = Tensor(rng.normal(size=(4, 4, 2)))
        out = fe_add_path(fr, Tensor(np.zeros((4, 4, 2))), p)
        x = fr + window_attention(norm(fr, p.norm_q), norm(fr, p.norm_kv),
                                  p.attn1, p.window)
        expected = x + window_attention(norm(x, p.norm2), None, p.attn2,
                                        p.window, shift=p.shift)
        assert np.array_equal(out.data, expected.data)

    def test_paths_preserve_rgb_shape(self):
        rng = np.random.default_rng(8)
        p = self.cross_params(rng)
        fr = Tensor(rng.normal(size=(4, 4, 2)))
        fd = Tensor(rng.normal(size=(4, 4, 2)))
        assert fe_mul_path(fr, fd, p).shape == fr.shape
        assert fe_add_path(fr, fd, p).shape == fr.shape

    def test_depth_perturbation_changes_output(self):
        rng = np.random.default_rng(9)
        p = self.cross_params(rng)
        fr = Tensor(rng.normal(size=(4, 4, 2)))
        fd = rng.normal(size=(4, 4, 2))
        base = fe_mul_path(fr, Tensor(fd), p).data
        bumped = fe_mul_path(fr, Tensor(fd + rng.normal(scale=0.1, size=fd.shape)), p).data
        assert np.max(np.abs(base - bumped)) > 1e-8

    def test_mul_add_gradcheck(self):
        rng = np.random.default_rng(10)
        p = self.cross_params(rng)
        fr = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        fd = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4, 2)))
        assert grad_check(lambda: (fe_mul_path(fr, fd, p) * w).sum(),
                          [fr, fd] + params_of(p)) < 1e-3
        assert grad_check(lambda: (fe_add_path(fr, fd, p) * w).sum(),
                          [fr, fd] + params_of(p)) < 1e-3

    def test_kv_gradients_flow_only_from_rgb(self):
        # with the query side detached, depth must receive no gradient at all:
        # keys and values are built from the RGB feature alone
        rng = np.random.default_rng(11)
        p = self.cross_params(rng)
        fr = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        fd = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        out = _cross_path(fr, fd, p, lambda r, d: (r * d).detach())
        out.sum().backward()
        assert fd.grad is None
        assert fr.grad is not None and np.any(fr.grad != 0)


class TestEnhancedFusion:
    def test_merge_output_shape(self):
        rng = np.random.default_rng(12)
        cfg = ModelConfig.micro()
        fe = EnhancedFusion("fe-full", rng, cfg)
        gh, gw = cfg.grid(4)
        dim = cfg.embed_dims[-1]
        out = fe(feature(4, "R", rng.normal(size=(gh, gw, dim))),
                 feature(4, "D", rng.normal(size=(gh, gw, dim))))
        assert out.scale_id == 5
        assert out.tokens.shape == (gh, gw, 2 * dim)

    def test_zero_merge_mlp_gives_constant_bias(self):
        rng = np.random.default_rng(13)
        cfg = ModelConfig.micro()
        fe = EnhancedFusion("fe-full", rng, cfg)
        for _, t in iter_params(fe.merge):
            t.data[:] = 0.0
        fe.merge.mlp.fc2.bias.data[:] = np.arange(16.0)
        gh, gw = cfg.grid(4)
        dim = cfg.embed_dims[-1]
        out1 = fe(feature(4, "R", rng.normal(size=(gh, gw, dim))),
                  feature(4, "D", rng.normal(size=(gh, gw, dim))))
        out2 = fe(feature(4, "R", rng.normal(size=(gh, gw, dim))),
                  feature(4, "D", rng.normal(size=(gh, gw, dim))))
        assert np.array_equal(out1.tokens.data, out2.tokens.data)
        assert np.allclose(out1.tokens.data[0, 0], np.arange(16.0))

    def test_full_depth_sensitivity(self):
        rng = np.random.default_rng(14)
        cfg = ModelConfig.micro()
        fe = EnhancedFusion("fe-full", rng, cfg)
        gh, gw = cfg.grid(4)
        dim = cfg.embed_dims[-1]
        fr = rng.normal(size=(gh, gw, dim))
        fd = rng.normal(size=(gh, gw, dim))
        base = fe(feature(4, "R", fr), feature(4, "D", fd)).tokens.data
        bump = fe(feature(4, "R", fr),
                  feature(4, "D", fd + rng.normal(scale=0.05, size=fd.shape))).tokens.data
        assert np.max(np.abs(base - bump)) > 1e-8

    def test_end_to_end_gradcheck(self):
        rng = np.random.default_rng(15)
        concat_p = scaled(_init_concat_path(rng, 4, 1, 2, 1, True), 10.0)
        mul_p = scaled(_init_cross_path(rng, 2, 1, 2, 1, True), 10.0)
        add_p = scaled(_init_cross_path(rng, 2, 1, 2, 1, True), 10.0)
        from nunet.fusion import FeMergeParams
        from nunet.nn import MlpParams
        merge = FeMergeParams(mlp=MlpParams.init(rng, 8, 8, 4))
        merge.mlp.fc1.weight.data *= 10.0
        merge.mlp.fc2.weight.data *= 10.0
        fr = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        fd = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4, 4)))
        params = [fr, fd] + params_of(concat_p) + params_of(mul_p) \
            + params_of(add_p) + params_of(merge)

        def f():
            return (fuse_fe(fr, fd, concat_p, mul_p, add_p, merge) * w).sum()

        assert grad_check(f, params, max_per_param=6,
                          rng=np.random.default_rng(16)) < 1e-3


class TestVariantFactory:
    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            build_fusion_variant("fe-bogus", np.random.default_rng(0), ModelConfig.micro())

    def test_concat_only_equals_path(self):
        rng = np.random.default_rng(17)
        cfg = ModelConfig.micro()
        fe = build_fusion_variant("fe-concat-only", rng, cfg)
        gh, gw = cfg.grid(4)
        dim = cfg.embed_dims[-1]
        fr = rng.normal(size=(gh, gw, dim))
        fd = rng.normal(size=(gh, gw, dim))
        out = fe(feature(4, "R", fr), feature(4, "D", fd))
        direct = fe_concat_path(Tensor(fr), Tensor(fd), fe.concat_path)
        assert np.array_equal(out.tokens.data, direct.data)

    def test_plain_concat_has_no_params(self):
        fe = build_fusion_variant("fe-plain-concat", np.random.default_rng(18),
                                  ModelConfig.micro())
        parts = [fe.concat_path, fe.mul_path, fe.add_path, fe.merge]
        assert all(p is None for p in parts)
        assert fe.out_channels == 2 * ModelConfig.micro().embed_dims[-1]

    def module_param_count(self, fe):
        total = 0
        for part in (fe.concat_path, fe.mul_path, fe.add_path, fe.merge):
            total += sum(t.size for t in params_of(part))
        return total

    def test_parameter_count_ordering(self):
        # matches the published module-size ordering: full > no-swmsa > raw concat
        rng = np.random.default_rng(19)
        cfg = ModelConfig.micro()
        full = self.module_param_count(build_fusion_variant("fe-full", rng, cfg))
        no_sw = self.module_param_count(build_fusion_variant("fe-no-swmsa", rng, cfg))
        plain = self.module_param_count(build_fusion_variant("fe-plain-concat", rng, cfg))
        assert full > no_sw > plain

    def test_out_channels_per_variant(self):
        rng = np.random.default_rng(20)
        cfg = ModelConfig.micro()
        dim = cfg.embed_dims[-1]
        for kind, expected in (("fe-full", 2 * dim), ("fe-no-swmsa", 2 * dim),
                               ("fe-concat-only", 2 * dim), ("fe-plain-concat", 2 * dim),
                               ("fe-mul-only", dim), ("fe-add-only", dim)):
            assert build_fusion_variant(kind, rng, cfg).out_channels == expected
