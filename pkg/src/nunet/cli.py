"""Command-line interface.

Subcommands: synth, train, eval, gradcheck, ablate, contrib. Every command
is deterministic given its seed and config, writes fixed-name outputs under
--out, and uses exit codes 0 (success), 1 (runtime failure), 2 (usage or
config error).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .data import AugmentPolicy, load_dataset, synth_generate
from .decoder import NUTRIENTS, scale_contribution
from .encoder import ModelConfig
from .errors import ConfigError, NunetError
from .gradsuite import TOLERANCE, build_rows
from .model import NuNet
from .tensor import Tensor, no_grad
from .training import (ABLATE_VARIANTS, TrainConfig, ablate, eval_report,
                       evaluate, prepare_input, train)


def _positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from exc
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text!r} must be >= 1")
    return value


def load_run_config(path) -> tuple:
    """Read {'model': ..., 'train': ...} (both optional) from a JSON file."""
    if path is None:
        return ModelConfig.toy(), TrainConfig()
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    model_cfg = ModelConfig.from_dict(raw["model"]) if "model" in raw else ModelConfig.toy()
    train_cfg = TrainConfig.from_dict(raw["train"]) if "train" in raw else TrainConfig()
    return model_cfg, train_cfg


def _write_resolved_config(out_dir: Path, command: str, model_cfg: ModelConfig,
                           train_cfg: TrainConfig, extra: dict) -> None:
    blob = {"command": command, "model": model_cfg.to_dict(),
            "train": train_cfg.to_dict(), **extra}
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.json").write_text(json.dumps(blob, indent=2, sort_keys=True) + "\n")


def _write_csv(path: Path, header: list, rows: list) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _print_table(header: list, rows: list) -> None:
    cells = [header] + [[str(c) for c in row] for row in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    for r in cells:
        print("  ".join(c.rjust(w) for c, w in zip(r, widths)))


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------
def cmd_synth(args) -> int:
    summary = synth_generate(args.n, args.seed, args.out, image_size=args.size)
    print(f"wrote {summary['n']} samples ({summary['n_train']} train / "
          f"{summary['n_test']} test) to {args.out}")
    for name in NUTRIENTS:
        print(f"  {name}: min {summary['label_min'][name]:.4f}  "
              f"max {summary['label_max'][name]:.4f}")
    return 0


def cmd_train(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_resolved_config(out, "train", model_cfg, train_cfg,
                           {"data": str(args.data), "out": str(args.out),
                            "checkpoint_every": args.checkpoint_every,
                            "max_steps": args.max_steps})
    train_samples = load_dataset(args.data, "train")
    eval_samples = load_dataset(args.data, "test")
    model = NuNet(model_cfg, seed=train_cfg.seed)
    log = train(model, train_samples, train_cfg,
                eval_samples=eval_samples or None,
                max_steps=args.max_steps,
                log_path=out / "train_log.csv",
                out_dir=out, checkpoint_every=args.checkpoint_every)
    save_checkpoint(out / "checkpoint.bin", model)
    last = log.epochs[-1] if log.epochs else {}
    print(f"trained {len(log.step_losses)} steps; "
          f"final epoch loss {last.get('train_loss', float('nan')):.6f}")
    if "eval_mean_mape" in last:
        print(f"eval mean MAPE {last['eval_mean_mape']:.2f}%")
    print(f"outputs in {out}")
    return 0


def _eval_to_rows(report) -> list:
    rows = [[NUTRIENTS[j], f"{report.mae[j]:.6f}", f"{report.mape[j]:.4f}"]
            for j in range(len(NUTRIENTS))]
    rows.append(["mean", f"{float(np.mean(report.mae)):.6f}", f"{report.mean_mape:.4f}"])
    return rows


def cmd_eval(args) -> int:
    samples = load_dataset(args.data, args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} of {args.data} is empty")
    if args.oracle_predictions:
        truths = np.stack([s.label.as_array() for s in samples])
        report = eval_report(truths.copy(), truths)
    else:
        if args.checkpoint is None:
            raise ConfigError("--checkpoint is required unless --oracle-predictions")
        model = load_checkpoint(args.checkpoint)
        report = evaluate(model, samples, zero_depth=args.zero_depth)
    header = ["nutrient", "mae", "mape"]
    rows = _eval_to_rows(report)
    _print_table(header, rows)
    if args.out:
        _write_csv(Path(args.out) / "eval.csv", header, rows)
        print(f"wrote {Path(args.out) / 'eval.csv'}")
    return 0


def cmd_gradcheck(args) -> int:
    config = None
    if args.config is not None:
        config, _ = load_run_config(args.config)
    rows = build_rows(config=config, max_per_param=args.max_per_param)
    _print_table(["op", "params_checked", "worst_rel_err", "status"],
                 [[r.name, r.n_params, f"{r.worst_error:.3e}",
                   "ok" if r.worst_error <= TOLERANCE else "FAIL"] for r in rows])
    worst = max(r.worst_error for r in rows)
    print(f"worst relative error {worst:.3e} (tolerance {TOLERANCE:.0e})")
    return 0 if worst <= TOLERANCE else 1


def cmd_ablate(args) -> int:
    model_cfg, train_cfg = load_run_config(args.config)
    variants = args.variants.split(",") if args.variants else list(ABLATE_VARIANTS)
    out = Path(args.out)
    _write_resolved_config(out, "ablate", model_cfg, train_cfg,
                           {"data": str(args.data), "out": str(args.out),
                            "variants": variants, "steps": args.steps})
    train_samples = load_dataset(args.data, "train")
    eval_samples = load_dataset(args.data, "test")
    rows = ablate(train_samples, eval_samples, variants, model_cfg, train_cfg,
                  budget_steps=args.steps)
    header = (["variant", "param_count", "mape_mean"]
              + [f"mape_{n}" for n in NUTRIENTS])
    table = [[r["variant"], r["param_count"], f"{r['mape_mean']:.4f}"]
             + [f"{r[f'mape_{n}']:.4f}" for n in NUTRIENTS] for r in rows]
    _print_table(header, table)
    _write_csv(out / "ablate.csv", header, table)
    print(f"wrote {out / 'ablate.csv'}")
    return 0


def cmd_contrib(args) -> int:
    samples = load_dataset(args.data, args.split)
    if not samples:
        raise ConfigError(f"split {args.split!r} of {args.data} is empty")
    model = load_checkpoint(args.checkpoint)
    policy = AugmentPolicy.eval(target_size=model.config.image_size[0])
    rng = np.random.default_rng(0)
    scale_totals = None
    with no_grad():
        for sample in samples:
            rgb, depth = prepare_input(sample, rng, policy)
            final, per_scale = model.forward(rgb, depth)
            if scale_totals is None:
                scale_totals = [[s, out.data.copy()] for s, out in per_scale]
            else:
                for slot, (_, out) in zip(scale_totals, per_scale):
                    slot[1] += out.data
    final_total = np.sum([v for _, v in scale_totals], axis=0)
    matrix = scale_contribution([(s, v) for s, v in scale_totals], final_total)
    header = ["scale"] + list(NUTRIENTS)
    rows = [[s] + [f"{matrix[i, j]:.10f}" for j in range(len(NUTRIENTS))]
            for i, (s, _) in enumerate(scale_totals)]
    _print_table(header, rows)
    if args.out:
        _write_csv(Path(args.out) / "contrib.csv", header, rows)
        print(f"wrote {Path(args.out) / 'contrib.csv'}")
    return 0


# ----------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nunet",
        description="RGB-D nutrition estimation: synthetic data, training, "
                    "evaluation, gradient checks and ablations.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic RGB-D dataset")
    p.add_argument("--n", type=_positive_int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=_positive_int, default=64)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--config", default=None, help="run config JSON")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint-every", type=_positive_int, default=None)
    p.add_argument("--max-steps", type=_positive_int, default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--zero-depth", action="store_true",
                   help="zero the depth input (depth-ablated control)")
    p.add_argument("--oracle-predictions", action="store_true",
                   help=argparse.SUPPRESS)  # test hook: predictions := labels
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of every op")
    p.add_argument("--config", default=None)
    p.add_argument("--max-per-param", type=_positive_int, default=4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/evaluate ablation variants")
    p.add_argument("--variants", default=None,
                   help=f"comma list; default {','.join(ABLATE_VARIANTS)}")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--steps", type=_positive_int, default=30)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("contrib", help="per-scale contribution percentages")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.set_defaults(func=cmd_contrib)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except NunetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
