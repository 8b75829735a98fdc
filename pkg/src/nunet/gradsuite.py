"""Finite-difference verification of every differentiable operation.

Each row builds a small randomized instance of one op, wraps it in a
weighted-sum scalar objective, and compares reverse-mode gradients with
central differences via grad_check. The full-model row runs the loss of a
micro configuration on one sample; its per-tensor probe count is capped so
the suite stays within its runtime budget while still touching every
parameter tensor.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import fusion
from .decoder import HeadParams, UnetBlockParams, heads, unet_block
from .encoder import ModelConfig, ScaleFeature
from .model import NuNet
from .nn import AttentionParams, LayerNormParams, LinearParams, MlpParams, \
    attention, linear, mlp, norm
from .tensor import Tensor, grad_check
from .training import loss

TOLERANCE = 1e-3


@dataclass
class GradCheckRow:
    name: str
    worst_error: float
    n_params: int


def _weighted_sum(out: Tensor, rng: np.random.Generator) -> Tensor:
    return (out * Tensor(rng.normal(size=out.shape))).sum()


def _tensor(rng, shape, scale=1.0):
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _row(name, make, eps=1e-5, max_per_param=None, rng=None) -> GradCheckRow:
    f, params = make()
    err = grad_check(f, params, eps=eps, max_per_param=max_per_param, rng=rng)
    return GradCheckRow(name, err, sum(p.size for p in params))


def _attention_setup(rng, nw=2, window=2, dim=4, heads_=2):
    p = AttentionParams.init(rng, dim, heads_, window * window)
    # init std 0.02 keeps everything near zero; scale up so the check is not trivial
    for lp in (p.q_proj, p.k_proj, p.v_proj, p.out_proj):
        lp.weight.data *= 20.0
        lp.bias.data += rng.normal(scale=0.2, size=lp.bias.shape)
    p.bias_table.data *= 20.0
    return p


def _params_of(obj):
    from .nn import iter_params
    return [t for _, t in iter_params(obj)]


def build_rows(config: ModelConfig | None = None, max_per_param: int = 4) -> list:
    """Run the whole suite; returns one GradCheckRow per differentiable op."""
    rows = []

    def make_linear():
        rng = np.random.default_rng(11)
        p = LinearParams.init(rng, 3, 4)
        p.weight.data *= 30.0
        x = _tensor(rng, (2, 3))
        return (lambda: _weighted_sum(linear(x, p), np.random.default_rng(12))), [x, p.weight, p.bias]

    rows.append(_row("linear", make_linear))

    def make_layer_norm():
        rng = np.random.default_rng(21)
        p = LayerNormParams.init(5)
        p.gamma.data += rng.normal(scale=0.3, size=5)
        x = _tensor(rng, (3, 5))
        return (lambda: _weighted_sum(norm(x, p), np.random.default_rng(22))), [x, p.gamma, p.beta]

    rows.append(_row("layer_norm", make_layer_norm))

    def make_softmax():
        rng = np.random.default_rng(31)
        x = _tensor(rng, (2, 4))
        return (lambda: _weighted_sum(x.softmax(), np.random.default_rng(32))), [x]

    rows.append(_row("softmax", make_softmax))

    def make_mlp():
        rng = np.random.default_rng(41)
        p = MlpParams.init(rng, 3, 5, 3)
        p.fc1.weight.data *= 30.0
        p.fc2.weight.data *= 30.0
        x = _tensor(rng, (2, 3))
        return (lambda: _weighted_sum(mlp(x, p), np.random.default_rng(42))), [x] + _params_of(p)

    rows.append(_row("mlp", make_mlp))

    def make_attention():
        rng = np.random.default_rng(51)
        p = _attention_setup(rng)
        x = _tensor(rng, (2, 4, 4))
        return (lambda: _weighted_sum(attention(x, x, p), np.random.default_rng(52))), \
            [x] + _params_of(p)

    rows.append(_row("attention", make_attention))

    def make_cross(combine, seed):
        def make():
            rng = np.random.default_rng(seed)
            p = _attention_setup(rng)
            a = _tensor(rng, (2, 4, 4))
            b = _tensor(rng, (2, 4, 4))
            wrng = seed + 1
            return (lambda: _weighted_sum(attention(combine(a, b), a, p),
                                          np.random.default_rng(wrng))), [a, b] + _params_of(p)
        return make

    rows.append(_row("attention_cross_mul", make_cross(lambda a, b: a * b, 61)))
    rows.append(_row("attention_cross_add", make_cross(lambda a, b: a + b, 71)))

    def make_fl():
        rng = np.random.default_rng(81)
        p = fusion.FlScaleParams.init(rng, 4, 2, 2)
        for lp in (p.attn.q_proj, p.attn.k_proj, p.attn.v_proj, p.attn.out_proj):
            lp.weight.data *= 20.0
        fr = _tensor(rng, (4, 4, 4))
        fd = _tensor(rng, (4, 4, 4))
        def f():
            fused = fusion.fuse_fl(ScaleFeature(1, "R", fr), ScaleFeature(1, "D", fd), p)
            return _weighted_sum(fused.tokens, np.random.default_rng(82))
        return f, [fr, fd] + _params_of(p)

    rows.append(_row("fl", make_fl))

    def make_fe_path(runner, init, seed, dims):
        def make():
            rng = np.random.default_rng(seed)
            p = init(rng)
            fr = _tensor(rng, dims)
            fd = _tensor(rng, dims)
            return (lambda: _weighted_sum(runner(fr, fd, p),
                                          np.random.default_rng(seed + 1))), \
                [fr, fd] + _params_of(p)
        return make

    # 4x4 grid, window 2, shift 1 exercises the masked shifted sublayer
    rows.append(_row("fe_concat_path", make_fe_path(
        fusion.fe_concat_path,
        lambda rng: fusion._init_concat_path(rng, 4, 2, 2, 1, True), 91, (4, 4, 2))))
    rows.append(_row("fe_mul_path", make_fe_path(
        fusion.fe_mul_path,
        lambda rng: fusion._init_cross_path(rng, 2, 1, 2, 1, True), 101, (4, 4, 2))))
    rows.append(_row("fe_add_path", make_fe_path(
        fusion.fe_add_path,
        lambda rng: fusion._init_cross_path(rng, 2, 1, 2, 1, True), 111, (4, 4, 2))))

    def make_fe_merge():
        rng = np.random.default_rng(121)
        cfg = ModelConfig.micro()
        fe = fusion.EnhancedFusion("fe-full", rng, cfg)
        dim = cfg.embed_dims[-1]
        gh, gw = cfg.grid(4)
        fr = _tensor(rng, (gh, gw, dim), scale=0.5)
        fd = _tensor(rng, (gh, gw, dim), scale=0.5)
        params = [fr, fd]
        for part in (fe.concat_path, fe.mul_path, fe.add_path, fe.merge):
            params += _params_of(part)
        def f():
            out = fe(ScaleFeature(4, "R", fr), ScaleFeature(4, "D", fd))
            return _weighted_sum(out.tokens, np.random.default_rng(122))
        return f, params

    rows.append(_row("fe_merge", make_fe_merge,
                     max_per_param=max(8, max_per_param),
                     rng=np.random.default_rng(123)))

    def make_unet():
        rng = np.random.default_rng(131)
        p = UnetBlockParams.init(rng, 3, 2)
        for cp in (p.down1, p.down2, p.up1, p.up2):
            cp.weight.data *= 25.0
            cp.bias.data += rng.normal(scale=0.3, size=cp.bias.shape)
        x = _tensor(rng, (4, 4, 3))
        return (lambda: _weighted_sum(unet_block(x, p), np.random.default_rng(132))), \
            [x] + _params_of(p)

    rows.append(_row("unet_block", make_unet))

    def make_heads():
        rng = np.random.default_rng(141)
        p = HeadParams.init(rng, 3)
        p.proj.weight.data *= 30.0
        x = _tensor(rng, (2, 2, 3))
        return (lambda: _weighted_sum(heads(x, p), np.random.default_rng(142))), \
            [x] + _params_of(p)

    rows.append(_row("heads", make_heads))

    def make_loss():
        rng = np.random.default_rng(151)
        truths = rng.uniform(1.0, 50.0, size=(2, 5))
        preds = Tensor(truths + rng.uniform(0.5, 3.0, size=(2, 5)), requires_grad=True)
        return (lambda: loss(preds, truths)), [preds]

    rows.append(_row("loss", make_loss, eps=1e-5))

    def make_full_model():
        cfg = (config or ModelConfig.micro()).validate()
        model = NuNet(cfg, seed=7)
        rng = np.random.default_rng(161)
        # move off the tiny-variance init so the decoder layer norms are
        # well conditioned; central differences degrade near var ~ eps
        for _, t in model.named_parameters():
            t.data += rng.normal(scale=0.3, size=t.shape)
        w, h = cfg.image_size
        rgb = Tensor(rng.uniform(-1.0, 1.0, size=(h, w, 3)))
        depth = Tensor(rng.uniform(-1.0, 1.0, size=(h, w, 1)))
        truth = rng.uniform(1.0, 50.0, size=(1, 5))
        def f():
            final, _ = model.forward(rgb, depth)
            return loss([final], truth)
        return f, model.parameters()

    rows.append(_row("full_model", make_full_model,
                     max_per_param=max_per_param, rng=np.random.default_rng(171)))
    return rows
