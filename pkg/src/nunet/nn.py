"""Parameterized building blocks: linear, layer norm, MLP and windowed attention."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, layer_norm


def trunc_normal(rng: np.random.Generator, shape, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until every draw lies within 2 std."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2.0 * std
    while np.any(bad):
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2.0 * std
    return out


def iter_params(obj, prefix: str = ""):
    """Yield (name, Tensor) pairs from nested dataclasses/lists/dicts.

    Field order is declaration order, so iteration is deterministic and
    stable across runs; checkpoints and the optimizer both rely on that.
    """
    if obj is None:
        return
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from iter_params(getattr(obj, f.name), f"{prefix}.{f.name}" if prefix else f.name)
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_params(item, f"{prefix}.{i}")
        return
    if isinstance(obj, dict):
        for k in obj:
            yield from iter_params(obj[k], f"{prefix}.{k}")
        return
    # plain config values (ints, floats, strings) carry no parameters


@dataclass
class LinearParams:
    weight: Tensor  # (in_dim, out_dim)
    bias: Tensor  # (out_dim,)

    @staticmethod
    def init(rng: np.random.Generator, in_dim: int, out_dim: int) -> "LinearParams":
        return LinearParams(
            weight=Tensor(trunc_normal(rng, (in_dim, out_dim)), requires_grad=True),
            bias=Tensor(np.zeros(out_dim), requires_grad=True),
        )


def linear(x: Tensor, p: LinearParams) -> Tensor:
    """y = x @ W + b over the last axis."""
    if x.shape[-1] != p.weight.shape[0]:
        raise ShapeError(f"linear: input dim {x.shape[-1]} vs weight {p.weight.shape}")
    squeeze = x.ndim == 1
    if squeeze:
        x = x.reshape(1, -1)
    y = x.matmul(p.weight) + p.bias
    return y.reshape(-1) if squeeze else y


@dataclass
class LayerNormParams:
    gamma: Tensor
    beta: Tensor

    @staticmethod
    def init(dim: int) -> "LayerNormParams":
        return LayerNormParams(
            gamma=Tensor(np.ones(dim), requires_grad=True),
            beta=Tensor(np.zeros(dim), requires_grad=True),
        )


def norm(x: Tensor, p: LayerNormParams, eps: float = 1e-5) -> Tensor:
    return layer_norm(x, p.gamma, p.beta, eps=eps)


@dataclass
class MlpParams:
    fc1: LinearParams
    fc2: LinearParams

    @staticmethod
    def init(rng, in_dim: int, hidden_dim: int, out_dim: int | None = None) -> "MlpParams":
        return MlpParams(
            fc1=LinearParams.init(rng, in_dim, hidden_dim),
            fc2=LinearParams.init(rng, hidden_dim, out_dim if out_dim is not None else in_dim),
        )


def mlp(x: Tensor, p: MlpParams) -> Tensor:
    """linear -> GELU -> linear."""
    return linear(linear(x, p.fc1).gelu(), p.fc2)


@dataclass
class AttentionParams:
    """Projections plus the learnable per-head relative bias table.

    The bias table is stored dense, one (n_p, n_p) slice per head; at a
    fixed window size that is equivalent to the usual index-factored form.
    """

    q_proj: LinearParams
    k_proj: LinearParams
    v_proj: LinearParams
    out_proj: LinearParams
    bias_table: Tensor  # (num_heads, n_p, n_p)
    num_heads: int
    head_dim: int
    window_patches: int

    @staticmethod
    def init(rng, dim: int, num_heads: int, window_patches: int,
             head_dim: int | None = None) -> "AttentionParams":
        if head_dim is None:
            if dim % num_heads:
                raise ConfigError(f"dim {dim} not divisible by {num_heads} heads")
            head_dim = dim // num_heads
        inner = num_heads * head_dim
        return AttentionParams(
            q_proj=LinearParams.init(rng, dim, inner),
            k_proj=LinearParams.init(rng, dim, inner),
            v_proj=LinearParams.init(rng, dim, inner),
            out_proj=LinearParams.init(rng, inner, dim),
            bias_table=Tensor(
                trunc_normal(rng, (num_heads, window_patches, window_patches)),
                requires_grad=True),
            num_heads=num_heads,
            head_dim=head_dim,
            window_patches=window_patches,
        )


def attention(q_in: Tensor, kv_in: Tensor, p: AttentionParams,
              mask: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention over per-window token groups.

    ``q_in`` and ``kv_in`` are (nw, n_p, C). Queries come from ``q_in``;
    keys and values from ``kv_in``, so passing the same tensor twice gives
    self-attention and distinct tensors give cross-attention. ``mask`` is
    an optional additive (nw, n_p, n_p) tensor applied to the logits.
    """
    if q_in.shape != kv_in.shape:
        raise ShapeError(f"attention: query {q_in.shape} vs key/value {kv_in.shape}")
    if q_in.ndim != 3:
        raise ShapeError(f"attention expects (nw, n_p, C), got {q_in.shape}")
    nw, n_p, c = q_in.shape
    if n_p != p.window_patches:
        raise ShapeError(f"attention: {n_p} patches per window, params built for {p.window_patches}")
    h, d = p.num_heads, p.head_dim

    def split_heads(t: Tensor) -> Tensor:
        # (nw, n_p, h*d) -> (nw, h, n_p, d)
        return t.reshape(nw, n_p, h, d).transpose(0, 2, 1, 3)

    q = split_heads(linear(q_in, p.q_proj))
    k = split_heads(linear(kv_in, p.k_proj))
    v = split_heads(linear(kv_in, p.v_proj))

    logits = q.matmul(k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(d))
    logits = logits + p.bias_table.reshape(1, h, n_p, n_p)
    if mask is not None:
        if mask.shape != (nw, n_p, n_p):
            raise ShapeError(f"attention mask {mask.shape}, expected {(nw, n_p, n_p)}")
        logits = logits + mask.reshape(nw, 1, n_p, n_p)
    weights = logits.softmax()
    ctx = weights.matmul(v)  # (nw, h, n_p, d)
    merged = ctx.transpose(0, 2, 1, 3).reshape(nw, n_p, h * d)
    return linear(merged, p.out_proj)
