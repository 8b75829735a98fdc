"""Desk-scale RGB-D nutrition estimation with a dual-stream windowed-attention
encoder, two feature-fusion stages and a multi-scale deep-supervision decoder,
on top of a small float64 reverse-mode autodiff kernel."""

from .checkpoint import load_checkpoint, read_blob, save_checkpoint
from .data import (AugmentPolicy, InputPair, Sample, augment, load_dataset,
                   synth_generate)
from .decoder import (DECODER_WIRING, NUTRIENTS, NutritionVector, ScaleOutput,
                      decode, heads, scale_contribution, unet_block)
from .encoder import (ModelConfig, ScaleFeature, encode_dual, encoder_block,
                      patch_embed, patch_merge, shifted_window_mask,
                      window_partition, window_reverse)
from .errors import (CheckpointError, ConfigError, ContractError, DataError,
                     NonFiniteError, NunetError, ShapeError)
from .fusion import (FusedFeature, build_fusion_variant, fe_add_path,
                     fe_concat_path, fe_mul_path, fuse_fe, fuse_fl)
from .model import NuNet
from .nn import AttentionParams, attention, linear, mlp
from .tensor import Tensor, concat, grad_check, layer_norm, no_grad
from .training import (ABLATE_VARIANTS, AdamW, EvalReport, TrainConfig, ablate,
                       evaluate, loss, mae, mape, mape_mean, train)

__version__ = "0.1.0"
