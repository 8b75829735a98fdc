"""Multi-scale decoder with per-scale linear heads.

Scale 5 reads the enhanced-fusion feature directly. Scales 6..9 each
concatenate one lightweight-fusion feature (scale 10-s) with the
upsampled previous decoder feature, refine it with a small U-Net style
convolution block, and contribute a five-value estimate. The final
estimate is the running elementwise sum of all five scale outputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError
from .nn import LayerNormParams, LinearParams, linear, norm, trunc_normal
from .tensor import Tensor, concat

NUTRIENTS = ("calorie", "mass", "fat", "carb", "protein")
NUM_NUTRIENTS = len(NUTRIENTS)

# decoder scale s consumes the fused feature from scale 10 - s
DECODER_WIRING = {s: 10 - s for s in range(6, 10)}


@dataclass
class NutritionVector:
    """The five estimated values in fixed order."""

    calorie: float
    mass: float
    fat: float
    carb: float
    protein: float

    def as_array(self) -> np.ndarray:
        return np.array([self.calorie, self.mass, self.fat, self.carb, self.protein])

    @staticmethod
    def from_array(values) -> "NutritionVector":
        a = np.asarray(values, dtype=np.float64).reshape(-1)
        if a.shape != (NUM_NUTRIENTS,):
            raise ShapeError(f"nutrition vector needs {NUM_NUTRIENTS} values, got {a.shape}")
        return NutritionVector(*[float(v) for v in a])


@dataclass
class ScaleOutput:
    """One decoder scale's contribution (calibration terms may be negative)."""

    scale_id: int
    estimate: NutritionVector


@dataclass
class HeadParams:
    """Five independent scalar projections, stored as one (C, 5) map."""

    proj: LinearParams

    @staticmethod
    def init(rng, dim: int) -> "HeadParams":
        return HeadParams(proj=LinearParams.init(rng, dim, NUM_NUTRIENTS))


def heads(feature: Tensor, p: HeadParams) -> Tensor:
    """Global-average-pool the (gh, gw, C) feature, flatten, project to 5 values."""
    pooled = feature.mean(axis=(0, 1))
    return linear(pooled, p.proj)


@dataclass
class ConvParams:
    weight: Tensor  # (kh, kw, Cin, Cout)
    bias: Tensor

    @staticmethod
    def init(rng, cin: int, cout: int, k: int = 3) -> "ConvParams":
        return ConvParams(
            weight=Tensor(trunc_normal(rng, (k, k, cin, cout)), requires_grad=True),
            bias=Tensor(np.zeros(cout), requires_grad=True),
        )


def _conv(x: Tensor, p: ConvParams) -> Tensor:
    return x.conv2d(p.weight, p.bias)


@dataclass
class UnetBlockParams:
    """Two-level contracting/expanding conv block with a concatenated skip.

    Each inner conv is followed by a channel layer norm before its GELU;
    without it the chained decoder blocks amplify any optimizer drift
    exponentially and desk-scale training diverges within a few steps.
    """

    down1: ConvParams  # Cin -> width
    norm1: LayerNormParams
    down2: ConvParams  # width -> width (below the pooling)
    norm2: LayerNormParams
    up1: ConvParams  # 2*width -> width (after skip concat)
    norm3: LayerNormParams
    up2: ConvParams  # width -> Cout, linear

    @staticmethod
    def init(rng, cin: int, cout: int) -> "UnetBlockParams":
        width = cin
        return UnetBlockParams(
            down1=ConvParams.init(rng, cin, width),
            norm1=LayerNormParams.init(width),
            down2=ConvParams.init(rng, width, width),
            norm2=LayerNormParams.init(width),
            up1=ConvParams.init(rng, 2 * width, width),
            norm3=LayerNormParams.init(width),
            up2=ConvParams.init(rng, width, cout),
        )


def unet_block(x: Tensor, p: UnetBlockParams) -> Tensor:
    """Contract, expand, and fuse through the skip; spatial dims are preserved.

    Grids too small to pool (gh or gw < 2) take a conv-only path through the
    first and last convolutions; the inner ones stay unused there.
    """
    gh, gw, _ = x.shape
    skip = norm(_conv(x, p.down1), p.norm1).gelu()
    if gh < 2 or gw < 2:
        return _conv(skip, p.up2)
    bottom = norm(_conv(skip.avg_pool2d(2), p.down2), p.norm2).gelu()
    up = bottom.resize_nearest(gh, gw)
    merged = norm(_conv(concat([skip, up], axis=-1), p.up1), p.norm3).gelu()
    return _conv(merged, p.up2)


@dataclass
class DecoderParams:
    """Heads for scales 5..9 plus the scale-6..9 conv blocks.

    ``multi_scale=False`` keeps only the scale-5 head (single-scale model).
    ``channels`` records each block's output width for wiring introspection.
    """

    head5: HeadParams
    blocks: dict = field(default_factory=dict)  # scale -> UnetBlockParams
    scale_heads: dict = field(default_factory=dict)  # scale -> HeadParams
    channels: dict = field(default_factory=dict)  # scale -> output channels
    multi_scale: bool = True

    @staticmethod
    def init(rng, fused_channels: dict, multi_scale: bool = True) -> "DecoderParams":
        """``fused_channels`` maps fused scale id (1..5) to channel width."""
        dec = DecoderParams(head5=HeadParams.init(rng, fused_channels[5]),
                            multi_scale=multi_scale)
        if not multi_scale:
            return dec
        prev = fused_channels[5]
        for s in range(6, 10):
            fused_c = fused_channels[DECODER_WIRING[s]]
            out_c = fused_channels[DECODER_WIRING[s]]
            dec.blocks[s] = UnetBlockParams.init(rng, fused_c + prev, out_c)
            dec.scale_heads[s] = HeadParams.init(rng, out_c)
            dec.channels[s] = out_c
            prev = out_c
        return dec


def decode(fused: dict, params: DecoderParams) -> tuple:
    """Run the decoder over the fused features.

    Args:
        fused: scale id (1..5) -> fused token Tensor. Single-scale decoders
            only require scale 5.
        params: decoder parameters.

    Returns:
        (final, per_scale): the summed (5,) estimate tensor and the ordered
        list of (scale_id, (5,) tensor) contributions.
    """
    if 5 not in fused:
        raise ContractError("decode needs the scale-5 fused feature")
    per_scale = [(5, heads(fused[5], params.head5))]
    final = per_scale[0][1]
    if params.multi_scale:
        missing = [s for s in range(1, 5) if s not in fused]
        if missing:
            raise ContractError(f"decode missing fused scales {missing}")
        prev = fused[5]
        for s in range(6, 10):
            target = fused[DECODER_WIRING[s]]
            gh, gw, _ = target.shape
            x = concat([target, prev.resize_nearest(gh, gw)], axis=-1)
            prev = unet_block(x, params.blocks[s])
            out = heads(prev, params.scale_heads[s])
            per_scale.append((s, out))
            final = final + out
    return final, per_scale


def scale_contribution(per_scale, final) -> np.ndarray:
    """Percentage of each scale's estimate within the final estimate.

    Rows follow the per_scale order (scales 5..9), columns the nutrient
    order; each column sums to 100 up to accumulation error. Entries can be
    negative for calibrating scales.
    """
    final_values = final.data if isinstance(final, Tensor) else np.asarray(final)
    zero = [NUTRIENTS[j] for j in range(NUM_NUTRIENTS) if final_values[j] == 0.0]
    if zero:
        raise ContractError(f"scale contribution undefined: zero final estimate for {zero}")
    rows = []
    for _, est in per_scale:
        values = est.data if isinstance(est, Tensor) else np.asarray(est)
        rows.append(100.0 * values / final_values)
    return np.stack(rows)
