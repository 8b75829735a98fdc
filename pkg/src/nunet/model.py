"""The full RGB-D nutrition estimation model.

Wires the dual encoder, the per-scale lightweight fusion, the scale-5
enhanced fusion and the multi-scale decoder into one parameter tree with
deterministic, seeded initialization.
"""

from __future__ import annotations

import numpy as np

from .decoder import DecoderParams, NutritionVector, ScaleOutput, decode
from .encoder import ModelConfig, encode_dual, DualEncoderParams
from .errors import ConfigError
from .fusion import FE_KINDS, FL_KINDS, build_fusion_variant
from .nn import iter_params
from .tensor import Tensor, assert_all_finite


class NuNet:
    """Dual-stream windowed-attention encoder + fusion + deep-supervision decoder."""

    def __init__(self, config: ModelConfig, fl_kind: str = "fl-full",
                 fe_kind: str = "fe-full", multi_scale: bool = True, seed: int = 0):
        config.validate()
        if fl_kind not in FL_KINDS:
            raise ConfigError(f"fl_kind {fl_kind!r} not in {FL_KINDS}")
        if fe_kind not in FE_KINDS:
            raise ConfigError(f"fe_kind {fe_kind!r} not in {FE_KINDS}")
        self.config = config
        self.fl_kind = fl_kind
        self.fe_kind = fe_kind
        self.multi_scale = bool(multi_scale)
        self.seed = int(seed)

        rng = np.random.default_rng(seed)
        self.encoder = DualEncoderParams.init(rng, config)
        # single-scale models drop scales 6-9, which also drops all FL use
        self.fl = build_fusion_variant(fl_kind, rng, config) if multi_scale else None
        self.fe = build_fusion_variant(fe_kind, rng, config)
        fused_channels = {s: config.embed_dims[s - 1] for s in range(1, 5)}
        fused_channels[5] = self.fe.out_channels
        self.decoder = DecoderParams.init(rng, fused_channels, multi_scale=multi_scale)

    # ------------------------------------------------------------------
    def forward(self, rgb: Tensor, depth: Tensor, check_finite: bool = False) -> tuple:
        """Returns (final (5,) tensor, list of (scale_id, (5,) tensor))."""
        feats_r, feats_d = encode_dual(rgb, depth, self.config, self.encoder)
        if check_finite:
            for f in feats_r + feats_d:
                f.tokens.assert_finite(f"encoder scale {f.scale_id} stream {f.stream}")
        fused = {}
        if self.multi_scale:
            for fr, fd in zip(feats_r[:4], feats_d[:4]):
                fused[fr.scale_id] = self.fl(fr, fd).tokens
        fused[5] = self.fe(feats_r[3], feats_d[3]).tokens
        if check_finite:
            assert_all_finite((f"fused scale {s}", t) for s, t in fused.items())
        final, per_scale = decode(fused, self.decoder)
        if check_finite:
            final.assert_finite("final estimate")
        return final, per_scale

    def predict(self, rgb: Tensor, depth: Tensor) -> tuple:
        """Inference convenience: plain NutritionVector plus per-scale outputs."""
        from .tensor import no_grad
        with no_grad():
            final, per_scale = self.forward(rgb, depth)
        return (NutritionVector.from_array(final.data),
                [ScaleOutput(s, NutritionVector.from_array(t.data)) for s, t in per_scale])

    # ------------------------------------------------------------------
    def named_parameters(self) -> list:
        named = list(iter_params(self.encoder, "encoder"))
        if self.fl is not None:
            named += list(iter_params(self.fl.scales, "fl"))
        for part in ("concat_path", "mul_path", "add_path", "merge"):
            named += list(iter_params(getattr(self.fe, part), f"fe.{part}"))
        named += list(iter_params(self.decoder, "decoder"))
        return named

    def parameters(self) -> list:
        return [t for _, t in self.named_parameters()]

    def num_params(self) -> int:
        return sum(t.size for t in self.parameters())

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    # ------------------------------------------------------------------
    def config_blob(self) -> dict:
        """Canonical architecture description stored in checkpoints."""
        return {
            "model": self.config.to_dict(),
            "fl_kind": self.fl_kind,
            "fe_kind": self.fe_kind,
            "multi_scale": self.multi_scale,
        }

    @staticmethod
    def from_config_blob(blob: dict, seed: int = 0) -> "NuNet":
        try:
            return NuNet(ModelConfig.from_dict(blob["model"]),
                         fl_kind=blob["fl_kind"], fe_kind=blob["fe_kind"],
                         multi_scale=bool(blob["multi_scale"]), seed=seed)
        except KeyError as exc:
            raise ConfigError(f"model blob missing field {exc}") from exc
