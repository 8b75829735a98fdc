"""Decoder: heads, conv blocks, wiring, summation and contribution matrix."""

import numpy as np
import pytest

from nunet.decoder import (DECODER_WIRING, DecoderParams, HeadParams,
                           NutritionVector, UnetBlockParams, decode, heads,
                           scale_contribution, unet_block)
from nunet.errors import ContractError, ShapeError
from nunet.nn import LinearParams, iter_params
from nunet.tensor import Tensor, grad_check


def params_of(obj):
    return [t for _, t in iter_params(obj)]


class TestNutritionVector:
    def test_fixed_order(self):
        v = NutritionVector.from_array([1, 2, 3, 4, 5])
        assert (v.calorie, v.mass, v.fat, v.carb, v.protein) == (1, 2, 3, 4, 5)
        assert np.array_equal(v.as_array(), [1, 2, 3, 4, 5])

    def test_wrong_length(self):
        with pytest.raises(ShapeError):
            NutritionVector.from_array([1, 2, 3])


class TestHeads:
    def test_zero_weights_zero_output(self):
        p = HeadParams(proj=LinearParams(Tensor(np.zeros((3, 5))), Tensor(np.zeros(5))))
        out = heads(Tensor(np.random.default_rng(0).normal(size=(2, 2, 3))), p)
        assert np.array_equal(out.data, np.zeros(5))

    def test_constant_feature_hand_weights(self):
        w = np.arange(15.0).reshape(3, 5)
        p = HeadParams(proj=LinearParams(Tensor(w), Tensor(np.ones(5))))
        out = heads(Tensor(np.full((4, 4, 3), 2.0)), p)
        assert np.allclose(out.data, 2.0 * w.sum(axis=0) + 1.0)

    def test_gradcheck(self):
        rng = np.random.default_rng(1)
        p = HeadParams.init(rng, 3)
        p.proj.weight.data *= 30.0
        x = Tensor(rng.normal(size=(2, 2, 3)), requires_grad=True)
        c = Tensor(rng.normal(size=5))
        assert grad_check(lambda: (heads(x, p) * c).sum(), [x] + params_of(p)) < 1e-4


class TestUnetBlock:
    def test_spatial_dims_preserved(self):
        rng = np.random.default_rng(2)
        for gh, gw in ((2, 2), (4, 6), (5, 3)):
            p = UnetBlockParams.init(rng, 3, 2)
            out = unet_block(Tensor(rng.normal(size=(gh, gw, 3))), p)
            assert out.shape == (gh, gw, 2)

    def test_zero_weights_bias_constant(self):
        rng = np.random.default_rng(3)
        p = UnetBlockParams.init(rng, 2, 3)
        for _, t in iter_params(p):
            t.data[:] = 0.0
        p.up2.bias.data[:] = [1.0, -2.0, 3.0]
        out = unet_block(Tensor(rng.normal(size=(4, 4, 2))), p)
        assert np.allclose(out.data, [1.0, -2.0, 3.0])

    def test_degenerate_single_pixel_grid(self):
        rng = np.random.default_rng(4)
        p = UnetBlockParams.init(rng, 3, 2)
        out = unet_block(Tensor(rng.normal(size=(1, 1, 3))), p)
        assert out.shape == (1, 1, 2)

    def test_gradcheck(self):
        rng = np.random.default_rng(5)
        p = UnetBlockParams.init(rng, 2, 2)
        for cp in (p.down1, p.down2, p.up1, p.up2):
            cp.weight.data *= 25.0
            cp.bias.data += rng.normal(scale=0.3, size=cp.bias.shape)
        x = Tensor(rng.normal(size=(4, 4, 2)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 4, 2)))
        assert grad_check(lambda: (unet_block(x, p) * w).sum(),
                          [x] + params_of(p)) < 1e-3


def micro_fused(rng, channels={1: 1, 2: 2, 3: 4, 4: 8, 5: 16}):
    grids = {1: 16, 2: 8, 3: 4, 4: 2, 5: 2}
    return {s: Tensor(rng.normal(size=(grids[s], grids[s], channels[s])))
            for s in channels}


class TestDecode:
    def test_wiring_map(self):
        assert DECODER_WIRING == {6: 4, 7: 3, 8: 2, 9: 1}

    def test_wiring_structural(self):
        # distinct channel widths per scale pin each block to exactly one
        # fused feature; swapping two features must break the conv contract
        rng = np.random.default_rng(6)
        channels = {1: 1, 2: 2, 3: 4, 4: 8, 5: 16}
        params = DecoderParams.init(rng, channels)
        prev = channels[5]
        for s in range(6, 10):
            expected_in = channels[DECODER_WIRING[s]] + prev
            assert params.blocks[s].down1.weight.shape[2] == expected_in
            prev = params.channels[s]
        fused = micro_fused(rng)
        decode(fused, params)  # correct wiring runs
        swapped = dict(fused)
        swapped[1], swapped[2] = (
            Tensor(np.random.default_rng(7).normal(size=(16, 16, 2))),
            Tensor(np.random.default_rng(8).normal(size=(8, 8, 1))))
        with pytest.raises(ShapeError):
            decode(swapped, params)

    def test_zeroed_late_heads_final_equals_scale5(self):
        rng = np.random.default_rng(9)
        params = DecoderParams.init(rng, {1: 1, 2: 2, 3: 4, 4: 8, 5: 16})
        for s in range(6, 10):
            for _, t in iter_params(params.scale_heads[s]):
                t.data[:] = 0.0
        fused = micro_fused(rng)
        final, per_scale = decode(fused, params)
        assert np.array_equal(final.data, per_scale[0][1].data)

    def test_final_is_exact_running_sum(self):
        rng = np.random.default_rng(10)
        params = DecoderParams.init(rng, {1: 1, 2: 2, 3: 4, 4: 8, 5: 16})
        final, per_scale = decode(micro_fused(rng), params)
        acc = per_scale[0][1].data
        for _, out in per_scale[1:]:
            acc = acc + out.data
        assert np.array_equal(final.data, acc)
        assert [s for s, _ in per_scale] == [5, 6, 7, 8, 9]

    def test_missing_scale_contract(self):
        rng = np.random.default_rng(11)
        params = DecoderParams.init(rng, {1: 1, 2: 2, 3: 4, 4: 8, 5: 16})
        fused = micro_fused(rng)
        del fused[3]
        with pytest.raises(ContractError):
            decode(fused, params)
        with pytest.raises(ContractError):
            decode({1: fused[1]}, params)

    def test_single_scale_mode(self):
        rng = np.random.default_rng(12)
        params = DecoderParams.init(rng, {5: 16}, multi_scale=False)
        fused = {5: Tensor(rng.normal(size=(2, 2, 16)))}
        final, per_scale = decode(fused, params)
        assert len(per_scale) == 1
        assert np.array_equal(final.data, heads(fused[5], params.head5).data)

    def test_decoder_gradcheck(self):
        rng = np.random.default_rng(13)
        channels = {1: 1, 2: 2, 3: 4, 4: 8, 5: 16}
        params = DecoderParams.init(rng, channels)
        for _, t in iter_params(params):
            if t.ndim >= 2:
                t.data *= 10.0
        grids = {1: 4, 2: 4, 3: 4, 4: 2, 5: 2}
        fused = {s: Tensor(rng.normal(size=(grids[s], grids[s], channels[s])),
                           requires_grad=True) for s in channels}
        c = Tensor(rng.normal(size=5))

        def f():
            final, _ = decode(fused, params)
            return (final * c).sum()

        probes = list(fused.values()) + params_of(params)
        assert grad_check(f, probes, max_per_param=4,
                          rng=np.random.default_rng(14)) < 1e-3


class TestScaleContribution:
    def test_single_active_scale(self):
        per_scale = [(5, np.array([2.0, 4.0, 1.0, 5.0, 3.0]))] + \
            [(s, np.zeros(5)) for s in range(6, 10)]
        final = np.array([2.0, 4.0, 1.0, 5.0, 3.0])
        matrix = scale_contribution(per_scale, final)
        assert np.allclose(matrix[0], 100.0)
        assert np.array_equal(matrix[1:], np.zeros((4, 5)))

    @pytest.mark.parametrize("seed", range(20))
    def test_columns_sum_to_100(self, seed):
        rng = np.random.default_rng(seed)
        outs = [(s, rng.normal(size=5)) for s in range(5, 10)]
        final = np.sum([v for _, v in outs], axis=0)
        if np.any(np.abs(final) < 1e-6):
            final += np.sign(final + 1e-12)  # keep the precondition comfortable
            outs[0] = (5, outs[0][1] + (final - np.sum([v for _, v in outs], axis=0)))
        matrix = scale_contribution(outs, final)
        assert np.max(np.abs(matrix.sum(axis=0) - 100.0)) < 1e-9

    def test_negative_entries_allowed(self):
        per_scale = [(5, np.array([3.0, 3.0, 3.0, 3.0, 3.0])),
                     (6, np.array([-1.0, 0.0, 0.0, 0.0, 0.0]))]
        matrix = scale_contribution(per_scale, np.array([2.0, 3.0, 3.0, 3.0, 3.0]))
        assert matrix[1, 0] == -50.0

    def test_zero_final_entry_reports_nutrient(self):
        per_scale = [(5, np.ones(5))]
        with pytest.raises(ContractError, match="mass"):
            scale_contribution(per_scale, np.array([1.0, 0.0, 1.0, 1.0, 1.0]))
