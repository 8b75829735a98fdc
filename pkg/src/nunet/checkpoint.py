"""Binary model checkpoints.

Layout: magic ``NUNET1``, a canonical JSON config blob, then the named
parameter tensors. All lengths are little-endian uint32; tensor payloads
are raw little-endian float64 in row-major order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError, ConfigError
from .model import NuNet

MAGIC = b"NUNET1"


def _canonical_json(blob: dict) -> bytes:
    return json.dumps(blob, sort_keys=True, separators=(",", ":")).encode("utf-8")


def save_checkpoint(path, model: NuNet) -> None:
    named = model.named_parameters()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        cfg = _canonical_json(model.config_blob())
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(named)))
        for name, tensor in named:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("checkpoint truncated")
    return buf


def read_blob(path) -> dict:
    """Read just the config blob without loading tensors."""
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        try:
            return json.loads(_read_exact(fh, cfg_len).decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"{path}: corrupt config blob: {exc}") from exc


def _diff_fields(expected: dict, stored: dict, prefix: str = "") -> list:
    keys = sorted(set(expected) | set(stored))
    diffs = []
    for k in keys:
        label = f"{prefix}{k}"
        if k not in expected or k not in stored:
            diffs.append(label)
        elif isinstance(expected[k], dict) and isinstance(stored[k], dict):
            diffs += _diff_fields(expected[k], stored[k], f"{label}.")
        elif expected[k] != stored[k]:
            diffs.append(label)
    return diffs


def load_checkpoint(path, expected_blob: dict | None = None, seed: int = 0) -> NuNet:
    """Rebuild the model stored at ``path``.

    If ``expected_blob`` is given, the stored config must match it exactly;
    a mismatch raises ConfigError naming the differing fields.
    """
    with open(path, "rb") as fh:
        if _read_exact(fh, len(MAGIC)) != MAGIC:
            raise CheckpointError(f"{path}: bad magic, not a model checkpoint")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4))
        blob = json.loads(_read_exact(fh, cfg_len).decode("utf-8"))
        if expected_blob is not None:
            diffs = _diff_fields(expected_blob, blob)
            if diffs:
                raise ConfigError(
                    "checkpoint config mismatch in fields: " + ", ".join(diffs))
        model = NuNet.from_config_blob(blob, seed=seed)
        params = dict(model.named_parameters())
        (count,) = struct.unpack("<I", _read_exact(fh, 4))
        if count != len(params):
            raise CheckpointError(
                f"{path}: {count} tensors stored, model has {len(params)}")
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4))
            name = _read_exact(fh, name_len).decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4))
            shape = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim))
            payload = _read_exact(fh, 8 * int(np.prod(shape)) if ndim else 8)
            if name not in params:
                raise CheckpointError(f"{path}: unknown parameter {name!r}")
            target = params[name]
            if tuple(shape) != target.shape:
                raise CheckpointError(
                    f"{path}: parameter {name!r} has shape {shape}, model wants {target.shape}")
            target.data[...] = np.frombuffer(payload, dtype="<f8").reshape(shape)
            seen.add(name)
        if len(seen) != len(params):
            raise CheckpointError(f"{path}: missing parameters {sorted(set(params) - seen)[:3]}")
    return model
