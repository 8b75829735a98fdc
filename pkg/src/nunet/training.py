"""Loss, metrics, the Adam training loop and the ablation harness."""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import AugmentPolicy, Sample, augment
from .decoder import NUTRIENTS, NUM_NUTRIENTS
from .encoder import ModelConfig
from .errors import ConfigError, ContractError, DataError, NonFiniteError, ShapeError
from .model import NuNet
from .tensor import Tensor, no_grad, stack_rows

ABLATE_VARIANTS = (
    "fl-add-only", "fl-wmsa-only", "fl-mul",
    "fe-plain-concat", "fe-no-swmsa", "fe-concat-only", "fe-mul-only", "fe-add-only",
    "single-scale", "multi-scale",
)


@dataclass
class TrainConfig:
    """Optimizer settings; defaults follow the published training recipe.

    Desk-scale runs override batch_size/epochs (and learning_rate: from a
    random initialization a few hundred steps at 1e-4 cannot reach label
    magnitude, see the acceptance suite).
    """

    batch_size: int = 32
    epochs: int = 150
    learning_rate: float = 1e-4
    weight_decay: float = 1e-5
    epsilon: float = 1e-6
    lr_decay: float = 0.99
    seed: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.learning_rate < 0 or self.weight_decay < 0 or self.epsilon <= 0:
            raise ConfigError("learning_rate/weight_decay/epsilon out of range")
        if not (0 < self.lr_decay <= 1):
            raise ConfigError(f"lr_decay {self.lr_decay} outside (0, 1]")
        return self

    def to_dict(self) -> dict:
        return {
            "batch_size": self.batch_size, "epochs": self.epochs,
            "learning_rate": self.learning_rate, "weight_decay": self.weight_decay,
            "epsilon": self.epsilon, "lr_decay": self.lr_decay, "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        cfg = TrainConfig()
        for k in d:
            if not hasattr(cfg, k):
                raise ConfigError(f"unknown train config field {k!r}")
            setattr(cfg, k, type(getattr(cfg, k))(d[k]))
        return cfg.validate()


@dataclass
class EvalReport:
    n: int
    mae: np.ndarray  # per nutrient
    mape: np.ndarray  # per nutrient
    mean_mape: float


# ----------------------------------------------------------------------
# loss and metrics
# ----------------------------------------------------------------------
def loss(pred_batch, truth_batch) -> Tensor:
    """Sum over nutrients of the batch-mean absolute error scaled by 1/(y+1).

    ``pred_batch`` is an (m, k) tensor or a list of (k,) tensors still on
    the graph; ``truth_batch`` is plain (m, k) ground truth. Training uses
    k = 5 but the arithmetic is generic over the nutrient count.
    """
    preds = pred_batch if isinstance(pred_batch, Tensor) else stack_rows(pred_batch)
    truths = np.asarray(truth_batch, dtype=np.float64)
    if preds.ndim != 2 or preds.shape[1] < 1:
        raise ShapeError(f"loss expects (m, k) predictions, got {preds.shape}")
    if truths.shape != preds.shape:
        raise ShapeError(f"loss shapes: predictions {preds.shape} vs truths {truths.shape}")
    if preds.shape[0] < 1:
        raise ContractError("loss needs at least one sample")
    if np.any(truths < 0):
        raise DataError("negative ground-truth nutrition value")
    terms = (preds - Tensor(truths)).abs() / Tensor(truths + 1.0)
    return terms.mean(axis=0).sum()


def _as_matrix(values, name: str) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != NUM_NUTRIENTS:
        raise ShapeError(f"{name} must be (n, {NUM_NUTRIENTS}), got {arr.shape}")
    return arr


def mae(preds, truths, j: int) -> float:
    p, t = _as_matrix(preds, "preds"), _as_matrix(truths, "truths")
    if p.shape[0] < 1:
        raise ContractError("mae over an empty sample set")
    return float(np.mean(np.abs(p[:, j] - t[:, j])))


def mape(preds, truths, j: int) -> float:
    """100 x MAE_j / mean ground truth of nutrient j."""
    t = _as_matrix(truths, "truths")
    denom = float(np.mean(t[:, j]))
    if denom <= 0.0:
        raise ContractError(
            f"mape undefined for {NUTRIENTS[j]}: mean ground truth is {denom}")
    return 100.0 * mae(preds, truths, j) / denom


def mape_mean(per_nutrient) -> float:
    values = np.asarray(per_nutrient, dtype=np.float64).reshape(-1)
    if values.shape != (NUM_NUTRIENTS,):
        raise ShapeError(f"expected {NUM_NUTRIENTS} per-nutrient values, got {values.shape}")
    return float(values.mean())


def eval_report(preds, truths) -> EvalReport:
    p, t = _as_matrix(preds, "preds"), _as_matrix(truths, "truths")
    maes = np.array([mae(p, t, j) for j in range(NUM_NUTRIENTS)])
    mapes = np.array([mape(p, t, j) for j in range(NUM_NUTRIENTS)])
    return EvalReport(n=p.shape[0], mae=maes, mape=mapes, mean_mape=mape_mean(mapes))


# ----------------------------------------------------------------------
# optimizer
# ----------------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay and bias-corrected moments."""

    def __init__(self, params, lr: float, weight_decay: float = 0.0,
                 eps: float = 1e-6, betas: tuple = (0.9, 0.999)):
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.eps = eps
        self.betas = betas
        self.t = 0
        self._m = [np.zeros_like(p.data) for p in self.params]
        self._v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.betas
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self._m, self._v):
            g = p.grad if p.grad is not None else 0.0
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * np.square(g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= self.lr * (update + self.weight_decay * p.data)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ----------------------------------------------------------------------
# input preparation and evaluation
# ----------------------------------------------------------------------
def prepare_input(sample: Sample, rng: np.random.Generator, policy: AugmentPolicy,
                  zero_depth: bool = False) -> tuple:
    aug = augment(sample, rng, policy)
    depth = np.zeros_like(aug.input.depth) if zero_depth else aug.input.depth
    return Tensor(aug.input.rgb), Tensor(depth)


def evaluate(model: NuNet, samples, policy: AugmentPolicy | None = None,
             zero_depth: bool = False) -> EvalReport:
    """Deterministic evaluation; NUNET_THREADS>1 parallelizes the forwards."""
    if not samples:
        raise ContractError("evaluate needs at least one sample")
    if policy is None:
        policy = AugmentPolicy.eval(target_size=model.config.image_size[0])
    rng = np.random.default_rng(0)  # eval policy draws nothing that matters
    inputs = [prepare_input(s, rng, policy, zero_depth=zero_depth) for s in samples]
    workers = int(os.environ.get("NUNET_THREADS", "1") or 1)

    def run(pair):
        final, _ = model.forward(*pair)
        return final.data

    with no_grad():
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                preds = list(pool.map(run, inputs))  # reduced in sample order
        else:
            preds = [run(pair) for pair in inputs]
    truths = np.stack([s.label.as_array() for s in samples])
    return eval_report(np.stack(preds), truths)


# ----------------------------------------------------------------------
# training loop
# ----------------------------------------------------------------------
@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)  # per-epoch dicts
    step_losses: list = field(default_factory=list)


_LOG_COLUMNS = ["epoch", "train_loss", "eval_mean_mape"] + [
    f"mape_{n}" for n in NUTRIENTS]


def train(model: NuNet, train_samples, config: TrainConfig, *,
          policy: AugmentPolicy | None = None, eval_samples=None,
          max_steps: int | None = None, log_path=None, out_dir=None,
          checkpoint_every: int | None = None) -> TrainLog:
    """Seed-deterministic mini-batch training with per-epoch lr decay.

    A non-finite loss aborts immediately; the diagnostic re-runs the
    offending forward with stage checks to name the first bad tensor.
    """
    config.validate()
    if not train_samples:
        raise ContractError("train needs a non-empty dataset")
    if policy is None:
        policy = AugmentPolicy.train(target_size=model.config.image_size[0])
    rng = np.random.default_rng(config.seed)
    optimizer = AdamW(model.parameters(), lr=config.learning_rate,
                      weight_decay=config.weight_decay, eps=config.epsilon)
    log = TrainLog()
    log_file = None
    writer = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(_LOG_COLUMNS)

    steps_done = 0
    try:
        for epoch in range(config.epochs):
            optimizer.lr = config.learning_rate * config.lr_decay ** epoch
            order = rng.permutation(len(train_samples))
            epoch_losses = []
            for start in range(0, len(order), config.batch_size):
                if max_steps is not None and steps_done >= max_steps:
                    break
                batch = [train_samples[i] for i in order[start:start + config.batch_size]]
                preds, truths = [], []
                for sample in batch:
                    rgb, depth = prepare_input(sample, rng, policy)
                    final, _ = model.forward(rgb, depth)
                    preds.append(final)
                    truths.append(sample.label.as_array())
                batch_loss = loss(preds, np.stack(truths))
                value = batch_loss.item()
                if not np.isfinite(value):
                    rgb, depth = prepare_input(batch[0], np.random.default_rng(0), policy)
                    model.forward(rgb, depth, check_finite=True)
                    raise NonFiniteError(f"non-finite loss at step {steps_done + 1}")
                model.zero_grad()
                batch_loss.backward()
                optimizer.step()
                epoch_losses.append(value)
                log.step_losses.append(value)
                steps_done += 1

            record = {"epoch": epoch + 1,
                      "train_loss": float(np.mean(epoch_losses)) if epoch_losses else None}
            if eval_samples:
                report = evaluate(model, eval_samples)
                record["eval_mean_mape"] = report.mean_mape
                for j, name in enumerate(NUTRIENTS):
                    record[f"mape_{name}"] = float(report.mape[j])
            log.epochs.append(record)
            if writer is not None:
                writer.writerow([record.get(c, "") for c in _LOG_COLUMNS])
                log_file.flush()
            if out_dir is not None and checkpoint_every and (epoch + 1) % checkpoint_every == 0:
                from .checkpoint import save_checkpoint
                save_checkpoint(Path(out_dir) / f"checkpoint_epoch{epoch + 1:04d}.bin", model)
            if max_steps is not None and steps_done >= max_steps:
                break
    finally:
        if log_file is not None:
            log_file.close()
    return log


# ----------------------------------------------------------------------
# ablation harness
# ----------------------------------------------------------------------
def variant_model(name: str, config: ModelConfig, seed: int = 0) -> NuNet:
    """Instantiate the model named by an ablation variant string."""
    if name == "multi-scale":
        return NuNet(config, seed=seed)
    if name == "single-scale":
        return NuNet(config, multi_scale=False, seed=seed)
    if name.startswith("fl-"):
        return NuNet(config, fl_kind=name, seed=seed)
    if name.startswith("fe-"):
        return NuNet(config, fe_kind=name, seed=seed)
    raise ConfigError(f"unknown ablation variant {name!r}")


def ablate(train_samples, eval_samples, variants, model_config: ModelConfig,
           train_config: TrainConfig, budget_steps: int = 30) -> list:
    """Train/evaluate each variant under a shared budget and seed.

    Returns one row per variant: parameter count plus the evaluation MAPEs.
    """
    rows = []
    for name in variants:
        model = variant_model(name, model_config, seed=train_config.seed)
        train(model, train_samples, train_config, max_steps=budget_steps)
        report = evaluate(model, eval_samples)
        row = {"variant": name, "param_count": model.num_params(),
               "mape_mean": report.mean_mape}
        for j, nutrient in enumerate(NUTRIENTS):
            row[f"mape_{nutrient}"] = float(report.mape[j])
        rows.append(row)
    return rows
