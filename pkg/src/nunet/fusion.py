"""RGB/depth feature fusion: lightweight per-scale blocks plus the enhanced
three-path block that produces the scale-5 feature.

The lightweight block adds the two streams and refines the sum with a
single windowed attention. The enhanced block runs three parallel paths
(channel concatenation, multiplicative cross-attention, additive
cross-attention); in the cross paths the query carries the combined
RGB/depth signal while keys and values come from RGB only, and the path
outputs merge through an MLP.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .encoder import ModelConfig, ScaleFeature, window_attention
from .errors import ConfigError, ShapeError
from .nn import AttentionParams, LayerNormParams, MlpParams, mlp, norm
from .tensor import Tensor, concat

FL_KINDS = ("fl-full", "fl-add-only", "fl-wmsa-only", "fl-mul")
FE_KINDS = ("fe-full", "fe-concat-only", "fe-mul-only", "fe-add-only",
            "fe-no-swmsa", "fe-plain-concat")


@dataclass
class FusedFeature:
    """Fused token grid for one scale (1-4 from FL, 5 from FE)."""

    scale_id: int
    tokens: Tensor


# ----------------------------------------------------------------------
# lightweight fusion (scales 1-4)
# ----------------------------------------------------------------------
@dataclass
class FlScaleParams:
    pre_norm: LayerNormParams
    attn: AttentionParams
    window: int

    @staticmethod
    def init(rng, dim: int, heads: int, window: int) -> "FlScaleParams":
        return FlScaleParams(
            pre_norm=LayerNormParams.init(dim),
            attn=AttentionParams.init(rng, dim, heads, window * window),
            window=window,
        )


def fuse_fl(f_rgb: ScaleFeature, f_depth: ScaleFeature, p: FlScaleParams) -> FusedFeature:
    """summed = fR + fD; fused = summed + W-attention(LN(summed))."""
    if f_rgb.scale_id != f_depth.scale_id:
        raise ShapeError(f"fuse_fl scales differ: {f_rgb.scale_id} vs {f_depth.scale_id}")
    if f_rgb.tokens.shape != f_depth.tokens.shape:
        raise ShapeError(
            f"fuse_fl shapes differ: {f_rgb.tokens.shape} vs {f_depth.tokens.shape}")
    summed = f_rgb.tokens + f_depth.tokens
    fused = summed + window_attention(norm(summed, p.pre_norm), None, p.attn, p.window)
    return FusedFeature(scale_id=f_rgb.scale_id, tokens=fused)


class LightFusion:
    """Per-scale lightweight fusion with the ablation variants of its parts."""

    def __init__(self, kind: str, rng: np.random.Generator, config: ModelConfig):
        if kind not in FL_KINDS:
            raise ConfigError(f"unknown lightweight-fusion kind {kind!r}")
        self.kind = kind
        self.scales = None
        if kind in ("fl-full", "fl-wmsa-only"):
            self.scales = [
                FlScaleParams.init(rng, config.embed_dims[s - 1],
                                   config.num_heads[s - 1],
                                   config.effective_window(s))
                for s in range(1, 5)
            ]

    def __call__(self, f_rgb: ScaleFeature, f_depth: ScaleFeature) -> FusedFeature:
        if f_rgb.tokens.shape != f_depth.tokens.shape:
            raise ShapeError("lightweight fusion inputs must share a shape")
        s = f_rgb.scale_id
        if self.kind == "fl-full":
            return fuse_fl(f_rgb, f_depth, self.scales[s - 1])
        if self.kind == "fl-add-only":
            return FusedFeature(s, f_rgb.tokens + f_depth.tokens)
        if self.kind == "fl-mul":
            return FusedFeature(s, f_rgb.tokens * f_depth.tokens)
        # fl-wmsa-only: keep just the attention half of the full block
        p = self.scales[s - 1]
        summed = f_rgb.tokens + f_depth.tokens
        return FusedFeature(
            s, window_attention(norm(summed, p.pre_norm), None, p.attn, p.window))


# ----------------------------------------------------------------------
# enhanced fusion (scale 5)
# ----------------------------------------------------------------------
@dataclass
class FeConcatPathParams:
    norm1: LayerNormParams
    attn1: AttentionParams
    norm2: LayerNormParams
    attn2: AttentionParams | None  # shifted; absent in the no-swmsa ablation
    window: int
    shift: int


@dataclass
class FeCrossPathParams:
    norm_q: LayerNormParams
    norm_kv: LayerNormParams
    attn1: AttentionParams  # cross: query from combined signal, K/V from RGB
    norm2: LayerNormParams
    attn2: AttentionParams | None
    window: int
    shift: int


def _init_concat_path(rng, dim2, heads, window, shift, with_sw) -> FeConcatPathParams:
    n_p = window * window
    return FeConcatPathParams(
        norm1=LayerNormParams.init(dim2),
        attn1=AttentionParams.init(rng, dim2, heads, n_p),
        norm2=LayerNormParams.init(dim2),
        attn2=AttentionParams.init(rng, dim2, heads, n_p) if with_sw else None,
        window=window,
        shift=shift,
    )


def _init_cross_path(rng, dim, heads, window, shift, with_sw) -> FeCrossPathParams:
    n_p = window * window
    return FeCrossPathParams(
        norm_q=LayerNormParams.init(dim),
        norm_kv=LayerNormParams.init(dim),
        attn1=AttentionParams.init(rng, dim, heads, n_p),
        norm2=LayerNormParams.init(dim),
        attn2=AttentionParams.init(rng, dim, heads, n_p) if with_sw else None,
        window=window,
        shift=shift,
    )


def fe_concat_path(f4_rgb: Tensor, f4_depth: Tensor, p: FeConcatPathParams) -> Tensor:
    """Channel concat, then windowed and shifted-window attention with residuals."""
    if f4_rgb.shape != f4_depth.shape:
        raise ShapeError("concat path inputs must share a shape")
    x = concat([f4_rgb, f4_depth], axis=-1)
    x = x + window_attention(norm(x, p.norm1), None, p.attn1, p.window)
    if p.attn2 is not None:
        x = x + window_attention(norm(x, p.norm2), None, p.attn2, p.window, shift=p.shift)
    return x


def _cross_path(f4_rgb: Tensor, f4_depth: Tensor, p: FeCrossPathParams, combine) -> Tensor:
    if f4_rgb.shape != f4_depth.shape:
        raise ShapeError("cross path inputs must share a shape")
    query_src = combine(f4_rgb, f4_depth)
    # residual connects from the query-side (pre-norm) input
    x = query_src + window_attention(
        norm(query_src, p.norm_q), norm(f4_rgb, p.norm_kv), p.attn1, p.window)
    if p.attn2 is not None:
        x = x + window_attention(norm(x, p.norm2), None, p.attn2, p.window, shift=p.shift)
    return x


def fe_mul_path(f4_rgb: Tensor, f4_depth: Tensor, p: FeCrossPathParams) -> Tensor:
    """Query from the elementwise RGB*depth product; keys/values from RGB."""
    return _cross_path(f4_rgb, f4_depth, p, lambda r, d: r * d)


def fe_add_path(f4_rgb: Tensor, f4_depth: Tensor, p: FeCrossPathParams) -> Tensor:
    """Query from the elementwise RGB+depth sum; keys/values from RGB."""
    return _cross_path(f4_rgb, f4_depth, p, lambda r, d: r + d)


@dataclass
class FeMergeParams:
    mlp: MlpParams


def fuse_fe(f4_rgb: Tensor, f4_depth: Tensor, concat_p: FeConcatPathParams,
            mul_p: FeCrossPathParams, add_p: FeCrossPathParams,
            merge: FeMergeParams) -> Tensor:
    """Concatenate the three path outputs (4C) and merge through an MLP to 2C."""
    paths = concat([
        fe_concat_path(f4_rgb, f4_depth, concat_p),
        fe_mul_path(f4_rgb, f4_depth, mul_p),
        fe_add_path(f4_rgb, f4_depth, add_p),
    ], axis=-1)
    return mlp(paths, merge.mlp)


class EnhancedFusion:
    """Scale-5 fusion module; ``kind`` selects the ablation variant."""

    def __init__(self, kind: str, rng: np.random.Generator, config: ModelConfig):
        if kind not in FE_KINDS:
            raise ConfigError(f"unknown enhanced-fusion kind {kind!r}")
        self.kind = kind
        dim = config.embed_dims[-1]
        heads = config.num_heads[-1]
        window = config.effective_window(4)
        shift = config.effective_shift(4)
        if 2 * dim % heads:
            raise ConfigError(f"concat path dim {2 * dim} not divisible by {heads} heads")

        with_sw = kind != "fe-no-swmsa"
        self.concat_path = None
        self.mul_path = None
        self.add_path = None
        self.merge = None
        if kind in ("fe-full", "fe-no-swmsa", "fe-concat-only"):
            self.concat_path = _init_concat_path(rng, 2 * dim, heads, window, shift,
                                                 with_sw)
        if kind in ("fe-full", "fe-no-swmsa", "fe-mul-only"):
            self.mul_path = _init_cross_path(rng, dim, heads, window, shift, with_sw)
        if kind in ("fe-full", "fe-no-swmsa", "fe-add-only"):
            self.add_path = _init_cross_path(rng, dim, heads, window, shift, with_sw)
        if kind in ("fe-full", "fe-no-swmsa"):
            hidden = max(1, int(round(4 * dim * config.mlp_ratio)))
            self.merge = FeMergeParams(mlp=MlpParams.init(rng, 4 * dim, hidden, 2 * dim))

        if kind in ("fe-full", "fe-no-swmsa", "fe-concat-only", "fe-plain-concat"):
            self.out_channels = 2 * dim
        else:
            self.out_channels = dim

    def __call__(self, f4_rgb: ScaleFeature, f4_depth: ScaleFeature) -> FusedFeature:
        r, d = f4_rgb.tokens, f4_depth.tokens
        if r.shape != d.shape:
            raise ShapeError("enhanced fusion inputs must share a shape")
        if self.kind in ("fe-full", "fe-no-swmsa"):
            out = fuse_fe(r, d, self.concat_path, self.mul_path, self.add_path,
                          self.merge)
        elif self.kind == "fe-concat-only":
            out = fe_concat_path(r, d, self.concat_path)
        elif self.kind == "fe-mul-only":
            out = fe_mul_path(r, d, self.mul_path)
        elif self.kind == "fe-add-only":
            out = fe_add_path(r, d, self.add_path)
        else:  # fe-plain-concat
            out = concat([r, d], axis=-1)
        return FusedFeature(scale_id=5, tokens=out)


def build_fusion_variant(kind: str, rng: np.random.Generator, config: ModelConfig):
    """Factory for the named lightweight/enhanced fusion ablation variants."""
    if kind in FL_KINDS:
        return LightFusion(kind, rng, config)
    if kind in FE_KINDS:
        return EnhancedFusion(kind, rng, config)
    raise ConfigError(f"unknown fusion variant {kind!r}; "
                      f"expected one of {FL_KINDS + FE_KINDS}")
