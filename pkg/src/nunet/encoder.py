"""Dual-stream hierarchical windowed-attention encoder.

Two structurally identical four-scale streams process the RGB and the
depth image independently (no weight sharing); each scale is a stack of
window-attention blocks alternating plain and shifted windows, with 2x2
patch merging between scales doubling channels and halving the grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import (AttentionParams, LayerNormParams, LinearParams, MlpParams,
                 attention, linear, mlp, norm)
from .tensor import Tensor

NUM_SCALES = 4


@dataclass
class ModelConfig:
    """Architectural hyperparameters left open by the architecture itself.

    ``image_size`` is (W, H) pixels; token grids are stored (gh, gw) with
    gh = H / patch / 2^(s-1). ``depths[s]`` counts block pairs (one plain
    plus one shifted-window sublayer pair per block).
    """

    image_size: tuple = (64, 64)
    patch_size: int = 4
    window_size: int = 4
    embed_dims: tuple = (16, 32, 64, 128)
    num_heads: tuple = (1, 2, 4, 4)
    depths: tuple = (1, 1, 1, 1)
    mlp_ratio: float = 2.0

    @property
    def shift(self) -> int:
        return self.window_size // 2

    def validate(self) -> "ModelConfig":
        w, h = self.image_size
        div = self.patch_size * 2 ** (NUM_SCALES - 1)
        if w % div or h % div:
            raise ConfigError(
                f"image {w}x{h} not divisible by patch_size*8 = {div}")
        if len(self.embed_dims) != NUM_SCALES or len(self.num_heads) != NUM_SCALES \
                or len(self.depths) != NUM_SCALES:
            raise ConfigError("embed_dims/num_heads/depths must have 4 entries")
        for s in range(1, NUM_SCALES):
            if self.embed_dims[s] != 2 * self.embed_dims[s - 1]:
                raise ConfigError(f"embed_dims must double per scale, got {self.embed_dims}")
        for c, nh in zip(self.embed_dims, self.num_heads):
            if c % nh:
                raise ConfigError(f"dim {c} not divisible by {nh} heads")
        if self.window_size < 1 or self.patch_size < 1:
            raise ConfigError("window_size and patch_size must be positive")
        if any(d < 1 for d in self.depths):
            raise ConfigError("depths must be positive")
        for s in range(1, NUM_SCALES + 1):
            gh, gw = self.grid(s)
            we = self.effective_window(s)
            if gh % we or gw % we:
                raise ConfigError(
                    f"scale {s} grid {gh}x{gw} not divisible by window {we}")
        return self

    def grid(self, scale: int) -> tuple:
        """(gh, gw) token grid at encoder scale 1..4."""
        w, h = self.image_size
        f = self.patch_size * 2 ** (scale - 1)
        return h // f, w // f

    def effective_window(self, scale: int) -> int:
        """Window clamped to the grid so small scales keep a single window."""
        gh, gw = self.grid(scale)
        return min(self.window_size, gh, gw)

    def effective_shift(self, scale: int) -> int:
        """Half-window shift, disabled once one window covers the grid."""
        gh, gw = self.grid(scale)
        we = self.effective_window(scale)
        if we >= gh and we >= gw:
            return 0
        return we // 2

    def to_dict(self) -> dict:
        return {
            "image_size": list(self.image_size),
            "patch_size": self.patch_size,
            "window_size": self.window_size,
            "embed_dims": list(self.embed_dims),
            "num_heads": list(self.num_heads),
            "depths": list(self.depths),
            "mlp_ratio": self.mlp_ratio,
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        try:
            return ModelConfig(
                image_size=tuple(d["image_size"]),
                patch_size=int(d["patch_size"]),
                window_size=int(d["window_size"]),
                embed_dims=tuple(d["embed_dims"]),
                num_heads=tuple(d["num_heads"]),
                depths=tuple(d["depths"]),
                mlp_ratio=float(d["mlp_ratio"]),
            ).validate()
        except KeyError as exc:
            raise ConfigError(f"model config missing field {exc}") from exc

    @staticmethod
    def toy() -> "ModelConfig":
        """Desk-scale default."""
        return ModelConfig().validate()

    @staticmethod
    def micro() -> "ModelConfig":
        """Smallest windowed config; used by gradient-check runs."""
        return ModelConfig(
            image_size=(32, 32), patch_size=2, window_size=2,
            embed_dims=(1, 2, 4, 8), num_heads=(1, 1, 1, 1),
            depths=(1, 1, 1, 1), mlp_ratio=1.0,
        ).validate()


@dataclass
class ScaleFeature:
    """Token grid emitted by one stream at one scale."""

    scale_id: int
    stream: str  # 'R', 'D' or 'F'
    tokens: Tensor  # (gh, gw, C)


# ----------------------------------------------------------------------
# window geometry
# ----------------------------------------------------------------------
def window_partition(tokens: Tensor, window: int) -> Tensor:
    """(gh, gw, C) -> (nw, window^2, C) in raster order (windows and patches)."""
    gh, gw, c = tokens.shape
    if gh % window or gw % window:
        raise ShapeError(f"grid {gh}x{gw} not divisible by window {window}")
    nh, nw_ = gh // window, gw // window
    x = tokens.reshape(nh, window, nw_, window, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(nh * nw_, window * window, c)


def window_reverse(windows: Tensor, gh: int, gw: int) -> Tensor:
    """Exact inverse of window_partition."""
    nw, n_p, c = windows.shape
    if nw * n_p != gh * gw:
        raise ShapeError(f"{nw} windows x {n_p} patches cannot tile {gh}x{gw}")
    window = int(round(np.sqrt(n_p)))
    if window * window != n_p or gh % window or gw % window:
        raise ShapeError(f"cannot reverse windows of {n_p} patches onto {gh}x{gw}")
    nh, nw_ = gh // window, gw // window
    x = windows.reshape(nh, nw_, window, window, c)
    return x.transpose(0, 2, 1, 3, 4).reshape(gh, gw, c)


def shifted_window_mask(gh: int, gw: int, window: int, shift: int) -> np.ndarray:
    """Additive (nw, n_p, n_p) mask blocking cross-region pairs after a cyclic shift.

    Tokens are labeled by the standard three-band partition per axis; pairs
    whose labels differ get -1e9 so their post-softmax weight underflows to 0.
    A zero shift yields an all-zero mask (degenerate but allowed for tests).
    """
    if shift >= window:
        raise ConfigError(f"shift {shift} must be smaller than window {window}")
    if gh % window or gw % window:
        raise ShapeError(f"grid {gh}x{gw} not divisible by window {window}")
    n_p = window * window
    nw = (gh // window) * (gw // window)
    if shift == 0:
        return np.zeros((nw, n_p, n_p))
    labels = np.zeros((gh, gw))
    bands = (slice(0, -window), slice(-window, -shift), slice(-shift, None))
    region = 0
    for hs in bands:
        for ws in bands:
            labels[hs, ws] = region
            region += 1
    win_labels = window_partition(Tensor(labels.reshape(gh, gw, 1)), window).data
    win_labels = win_labels.reshape(nw, n_p)
    diff = win_labels[:, :, None] - win_labels[:, None, :]
    return np.where(diff != 0, -1e9, 0.0)


_MASK_CACHE: dict = {}


def _cached_mask(gh: int, gw: int, window: int, shift: int) -> Tensor | None:
    if shift == 0:
        return None
    key = (gh, gw, window, shift)
    if key not in _MASK_CACHE:
        _MASK_CACHE[key] = Tensor(shifted_window_mask(gh, gw, window, shift))
    return _MASK_CACHE[key]


def window_attention(q_tokens: Tensor, kv_tokens: Tensor | None, p: AttentionParams,
                     window: int, shift: int = 0) -> Tensor:
    """Windowed (optionally shifted, optionally cross) attention on a token grid.

    ``kv_tokens=None`` means self-attention on ``q_tokens``. Both grids are
    cyclically rolled by -shift, partitioned into windows, attended per
    window with the shift mask, then reassembled and unrolled.
    """
    self_attn = kv_tokens is None or kv_tokens is q_tokens
    gh, gw, _ = q_tokens.shape
    if shift:
        q_tokens = q_tokens.roll((-shift, -shift), (0, 1))
        if not self_attn:
            kv_tokens = kv_tokens.roll((-shift, -shift), (0, 1))
    q_win = window_partition(q_tokens, window)
    kv_win = q_win if self_attn else window_partition(kv_tokens, window)
    out = attention(q_win, kv_win, p, mask=_cached_mask(gh, gw, window, shift))
    out = window_reverse(out, gh, gw)
    if shift:
        out = out.roll((shift, shift), (0, 1))
    return out


# ----------------------------------------------------------------------
# encoder blocks
# ----------------------------------------------------------------------
@dataclass
class EncoderBlockParams:
    norm1: LayerNormParams
    attn: AttentionParams
    norm2: LayerNormParams
    mlp: MlpParams
    window: int
    shift: int  # 0 for the plain-window sublayer

    @staticmethod
    def init(rng, dim: int, heads: int, window: int, shift: int,
             mlp_ratio: float) -> "EncoderBlockParams":
        return EncoderBlockParams(
            norm1=LayerNormParams.init(dim),
            attn=AttentionParams.init(rng, dim, heads, window * window),
            norm2=LayerNormParams.init(dim),
            mlp=MlpParams.init(rng, dim, max(1, int(round(dim * mlp_ratio)))),
            window=window,
            shift=shift,
        )


def encoder_block(tokens: Tensor, p: EncoderBlockParams, shifted: bool) -> Tensor:
    """x + (S)W-attention(LN(x)), then x + MLP(LN(x))."""
    shift = p.shift if shifted else 0
    x = tokens + window_attention(norm(tokens, p.norm1), None, p.attn,
                                  p.window, shift=shift)
    return x + mlp(norm(x, p.norm2), p.mlp)


@dataclass
class PatchEmbedParams:
    proj: LinearParams
    patch_size: int

    @staticmethod
    def init(rng, patch_size: int, dim: int) -> "PatchEmbedParams":
        return PatchEmbedParams(
            proj=LinearParams.init(rng, patch_size * patch_size * 3, dim),
            patch_size=patch_size,
        )


def patch_embed(image: Tensor, p: PatchEmbedParams) -> Tensor:
    """Project non-overlapping patches to tokens; 1-channel input is replicated to 3."""
    h, w, ch = image.shape
    if ch == 1:
        from .tensor import concat
        image = concat([image, image, image], axis=-1)
    elif ch != 3:
        raise ShapeError(f"patch_embed expects 1 or 3 channels, got {ch}")
    ps = p.patch_size
    if h % ps or w % ps:
        raise ConfigError(f"image {h}x{w} not divisible by patch size {ps}")
    gh, gw = h // ps, w // ps
    x = image.reshape(gh, ps, gw, ps, 3).transpose(0, 2, 1, 3, 4)
    return linear(x.reshape(gh, gw, ps * ps * 3), p.proj)


@dataclass
class PatchMergeParams:
    norm: LayerNormParams
    reduction: LinearParams

    @staticmethod
    def init(rng, dim: int) -> "PatchMergeParams":
        return PatchMergeParams(
            norm=LayerNormParams.init(4 * dim),
            reduction=LinearParams.init(rng, 4 * dim, 2 * dim),
        )


def patch_merge(tokens: Tensor, p: PatchMergeParams) -> Tensor:
    """Concatenate 2x2 neighborhoods, layer-norm, project 4C -> 2C."""
    gh, gw, c = tokens.shape
    if gh % 2 or gw % 2:
        raise ShapeError(f"patch_merge needs an even grid, got {gh}x{gw}")
    x = tokens.reshape(gh // 2, 2, gw // 2, 2, c)
    x = x.transpose(0, 2, 1, 3, 4).reshape(gh // 2, gw // 2, 4 * c)
    return linear(norm(x, p.norm), p.reduction)


# ----------------------------------------------------------------------
# streams
# ----------------------------------------------------------------------
@dataclass
class StreamParams:
    embed: PatchEmbedParams
    blocks: list = field(default_factory=list)  # per scale: list of (W, SW) block pairs
    merges: list = field(default_factory=list)  # 3 inter-scale reductions

    @staticmethod
    def init(rng, config: ModelConfig) -> "StreamParams":
        blocks = []
        for s in range(1, NUM_SCALES + 1):
            dim = config.embed_dims[s - 1]
            heads = config.num_heads[s - 1]
            we = config.effective_window(s)
            sh = config.effective_shift(s)
            scale_blocks = []
            for _ in range(config.depths[s - 1]):
                scale_blocks.append((
                    EncoderBlockParams.init(rng, dim, heads, we, 0, config.mlp_ratio),
                    EncoderBlockParams.init(rng, dim, heads, we, sh, config.mlp_ratio),
                ))
            blocks.append(scale_blocks)
        merges = [PatchMergeParams.init(rng, config.embed_dims[s])
                  for s in range(NUM_SCALES - 1)]
        return StreamParams(
            embed=PatchEmbedParams.init(rng, config.patch_size, config.embed_dims[0]),
            blocks=blocks,
            merges=merges,
        )


def encode_stream(image: Tensor, params: StreamParams, stream: str) -> list:
    """Run one stream; returns the four per-scale ScaleFeatures."""
    tokens = patch_embed(image, params.embed)
    features = []
    for s in range(1, NUM_SCALES + 1):
        for plain, shifted in params.blocks[s - 1]:
            tokens = encoder_block(tokens, plain, shifted=False)
            tokens = encoder_block(tokens, shifted, shifted=True)
        features.append(ScaleFeature(scale_id=s, stream=stream, tokens=tokens))
        if s < NUM_SCALES:
            tokens = patch_merge(tokens, params.merges[s - 1])
    return features


@dataclass
class DualEncoderParams:
    rgb: StreamParams
    depth: StreamParams

    @staticmethod
    def init(rng, config: ModelConfig) -> "DualEncoderParams":
        return DualEncoderParams(
            rgb=StreamParams.init(rng, config),
            depth=StreamParams.init(rng, config),
        )


def encode_dual(rgb: Tensor, depth: Tensor, config: ModelConfig,
                params: DualEncoderParams) -> tuple:
    """Encode both images; streams only meet later, in fusion."""
    w, h = config.image_size
    if rgb.shape != (h, w, 3):
        raise ShapeError(f"rgb image {rgb.shape}, config wants {(h, w, 3)}")
    if depth.shape != (h, w, 1):
        raise ShapeError(f"depth image {depth.shape}, config wants {(h, w, 1)}")
    return (encode_stream(rgb, params.rgb, "R"),
            encode_stream(depth, params.depth, "D"))
