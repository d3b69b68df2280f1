"""Command-line entry point.

Subcommands: generate, pretrain, finetune, eval, sweep, ablate. Every run is
deterministic given its config and seed; training commands echo the resolved
config into the output directory next to checkpoints, per-epoch JSONL logs,
and metrics JSON.

Exit codes: 0 success, 1 usage or config error, 2 numeric failure during
training (non-finite loss).
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .config import AblationFlags, ConfigError, ExperimentConfig, ModelConfig
from .data import (
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    native_observed_rate,
    subsample_observed,
    write_dataset,
    zscore_apply,
    zscore_fit,
)
from .model import MartModel
from .optim import Adam
from .training import (
    NumericError,
    evaluate,
    finetune,
    load_checkpoint,
    pretrain,
    save_checkpoint,
)

_DEFAULT_RATES = "0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0"
_DEFAULT_SEEDS = "1,42,3407"


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on bad usage; here that code is reserved for numeric
    failures, so usage problems exit 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_common(p) -> None:
    p.add_argument("--deterministic", action="store_true",
                   help="no effect; runs are always deterministic")


def _build_parser() -> _Parser:
    parser = _Parser(prog="mart", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="write a synthetic sparse cohort")
    p.add_argument("--out", required=True, help="dataset directory to create")
    p.add_argument("--patients", type=int, required=True)
    p.add_argument("--vars", type=int, default=8, help="number of variables (default 8)")
    p.add_argument("--tmax", type=int, default=48, help="maximum stay length in hours (default 48)")
    p.add_argument("--tmin", type=int, default=None, help="minimum stay length (default tmax // 2)")
    p.add_argument("--observed", type=float, default=0.25, help="target observed-cell rate (default 0.25)")
    p.add_argument("--positive", type=float, default=0.14, help="target positive prevalence (default 0.14)")
    p.add_argument("--missingness", choices=("mcar", "mnar"), default="mcar")
    p.add_argument("--seed", type=int, default=0)
    _add_common(p)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("pretrain", help="self-supervised pre-training")
    p.add_argument("--data", required=True, help="dataset directory (train/val/test.csv)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", default=None, help="experiment config file")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--epochs", type=int, default=None, help="override total pre-training epochs")
    p.add_argument("--resume", default=None, help="continue from a pretrain checkpoint")
    _add_common(p)
    p.set_defaults(func=_cmd_pretrain)

    p = sub.add_parser("finetune", help="supervised fine-tuning")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--epochs", type=int, default=None, help="override fine-tuning epochs")
    p.add_argument("--checkpoint", default=None,
                   help="pre-trained checkpoint; omit to train from scratch")
    _add_common(p)
    p.set_defaults(func=_cmd_finetune)

    p = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "test"), default="test")
    p.add_argument("--out", default=None, help="directory for metrics.json (optional)")
    _add_common(p)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("sweep", help="metrics across observed-rate fractions")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--checkpoint", default=None, help="fine-tuned checkpoint (test-only mode)")
    p.add_argument("--config", default=None, help="experiment config (retrain mode)")
    p.add_argument("--rates", default=_DEFAULT_RATES, help=f"comma list (default {_DEFAULT_RATES})")
    p.add_argument("--seeds", default=_DEFAULT_SEEDS, help=f"comma list (default {_DEFAULT_SEEDS})")
    p.add_argument("--sweep-mode", choices=("test-only", "retrain"), default="test-only",
                   help="degrade test data only, or retrain per rate (default test-only)")
    p.add_argument("--absolute", action="store_true",
                   help="rates are absolute observed rates rather than fractions of the native rate; "
                        "targets above the native rate are skipped with a warning")
    _add_common(p)
    p.set_defaults(func=_cmd_sweep)

    p = sub.add_parser("ablate", help="run architecture/training variants")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--variants", default="full",
                   help="comma list of variants: full or any ablation flag name (default full)")
    _add_common(p)
    p.set_defaults(func=_cmd_ablate)
    return parser


# shared plumbing


def _resolve_config(config_path, data_dir, n_variables: int) -> ExperimentConfig:
    if config_path:
        cfg = ExperimentConfig.from_file(config_path)
        if cfg.model.n_variables != n_variables:
            raise ConfigError(
                f"config expects {cfg.model.n_variables} variables but the dataset has {n_variables}"
            )
        return replace(cfg, data_dir=str(data_dir))
    return ExperimentConfig(model=ModelConfig(n_variables=n_variables), data_dir=str(data_dir))


def _override_train(cfg: ExperimentConfig, *, seed=None, pretrain_epochs=None,
                    finetune_epochs=None) -> ExperimentConfig:
    train = cfg.train
    if seed is not None:
        train = replace(train, seed=seed)
    if pretrain_epochs is not None:
        train = replace(train, pretrain_epochs=pretrain_epochs)
    if finetune_epochs is not None:
        train = replace(train, finetune_epochs=finetune_epochs)
    return replace(cfg, train=train)


def _load_splits(data_dir):
    splits = load_dataset(data_dir)
    return splits, splits["train"][0].n_variables


def _log_writer(path: Path, *, truncate: bool = True):
    if truncate:
        path.write_text("")

    def cb(row: dict) -> None:
        with path.open("a") as fh:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        line = f"[{row['stage']}] epoch {row['epoch']:3d}  loss {row['loss']:.6f}"
        if row["val_metric"] is not None:
            line += f"  val {row['val_metric']:.4f}"
        print(f"{line}  ({row['seconds']}s)", flush=True)

    return cb


def _write_csv(path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            # numpy scalars subclass float but repr as np.float64(...), so
            # normalize before formatting
            writer.writerow([repr(float(v)) if isinstance(v, float) else v for v in row])


def _train_variant(cfg: ExperimentConfig, splits, out_dir: Path | None, *, log_cb=None):
    """Fresh model through the full pipeline (pretrain unless disabled, then
    fine-tune); returns (model, test report)."""
    stats = zscore_fit(splits["train"])
    train_n = zscore_apply(splits["train"], stats)
    val_n = zscore_apply(splits["val"], stats)
    test_n = zscore_apply(splits["test"], stats)
    model = MartModel.build(cfg.model_with_ablations(), cfg.train.seed, task=cfg.task)
    model.norm_stats = stats
    if not cfg.ablation.no_pretrain:
        pretrain(model, train_n, cfg.train, log_cb=log_cb)
    finetune(model, train_n, val_n, cfg.train, log_cb=log_cb)
    report = evaluate(model, test_n)
    if out_dir is not None:
        save_checkpoint(out_dir / "model.ckpt", model, stage="finetune",
                        train_cfg=cfg.train, epoch=cfg.train.finetune_epochs - 1)
        (out_dir / "metrics.json").write_text(report.to_json() + "\n")
        cfg.to_file(out_dir / "config.ini")
    return model, report


# commands


def _cmd_generate(args) -> int:
    spec = SyntheticSpec(
        n_patients=args.patients,
        n_variables=args.vars,
        t_max=args.tmax,
        observed_rate=args.observed,
        positive_rate=args.positive,
        missingness=args.missingness,
        seed=args.seed,
        t_min=args.tmin,
    )
    dataset = generate_synthetic(spec)
    write_dataset(dataset, args.out)
    print(f"wrote {args.out}: train {len(dataset.train)} / val {len(dataset.val)} / test {len(dataset.test)}")
    print(f"realized observed rate {dataset.realized_observed_rate:.4f}, "
          f"positive rate {dataset.realized_positive_rate:.4f}")
    return 0


def _cmd_pretrain(args) -> int:
    splits, n_vars = _load_splits(args.data)
    cfg = _resolve_config(args.config, args.data, n_vars)
    cfg = _override_train(cfg, seed=args.seed, pretrain_epochs=args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model_cfg = cfg.model_with_ablations()
    optimizer = None
    start = 0
    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if ckpt.stage != "pretrain":
            raise ConfigError(f"cannot resume pre-training from a {ckpt.stage!r} checkpoint")
        if ckpt.model.config != model_cfg:
            raise ConfigError("checkpoint architecture differs from the resolved config")
        model = ckpt.model
        start = (ckpt.epoch if ckpt.epoch is not None else -1) + 1
        if ckpt.optimizer_state is not None:
            params = list(model.backbone_params().values()) + model.pretrain_decoder_params()
            optimizer = Adam(params, lr=cfg.train.lr)
            optimizer.load_state_dict(ckpt.optimizer_state)
    else:
        model = MartModel.build(model_cfg, cfg.train.seed)
        model.norm_stats = zscore_fit(splits["train"])

    train_n = zscore_apply(splits["train"], model.norm_stats)
    print(f"pre-training on {len(train_n)} records, epochs {start}..{cfg.train.pretrain_epochs - 1}, "
          f"seed {cfg.train.seed}")
    history, optimizer = pretrain(
        model, train_n, cfg.train, start_epoch=start, optimizer=optimizer,
        log_cb=_log_writer(out / "log.jsonl", truncate=start == 0),
    )
    last = start + len(history) - 1
    save_checkpoint(out / "pretrain.ckpt", model, stage="pretrain", train_cfg=cfg.train,
                    epoch=last if last >= 0 else None, optimizer=optimizer)
    cfg.to_file(out / "config.ini")
    print(f"saved {out / 'pretrain.ckpt'}")
    return 0


def _cmd_finetune(args) -> int:
    splits, n_vars = _load_splits(args.data)
    cfg = _resolve_config(args.config, args.data, n_vars)
    cfg = _override_train(cfg, seed=args.seed, finetune_epochs=args.epochs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model_cfg = cfg.model_with_ablations()
    if args.checkpoint:
        ckpt = load_checkpoint(args.checkpoint)
        if ckpt.model.config != model_cfg:
            raise ConfigError("checkpoint architecture differs from the resolved config")
        if ckpt.model.task is not None and ckpt.model.task != cfg.task:
            raise ConfigError("checkpoint task differs from the resolved config")
        model = ckpt.model
        model.task = cfg.task
    else:
        model = MartModel.build(model_cfg, cfg.train.seed, task=cfg.task)
        model.norm_stats = zscore_fit(splits["train"])

    train_n = zscore_apply(splits["train"], model.norm_stats)
    val_n = zscore_apply(splits["val"], model.norm_stats)
    test_n = zscore_apply(splits["test"], model.norm_stats)
    source = args.checkpoint if args.checkpoint else "scratch"
    print(f"fine-tuning on {len(train_n)} records for {cfg.train.finetune_epochs} epochs "
          f"(backbone: {source}, seed {cfg.train.seed})")
    finetune(model, train_n, val_n, cfg.train, log_cb=_log_writer(out / "log.jsonl"))
    save_checkpoint(out / "model.ckpt", model, stage="finetune", train_cfg=cfg.train,
                    epoch=cfg.train.finetune_epochs - 1)
    cfg.to_file(out / "config.ini")
    report = evaluate(model, test_n)
    (out / "metrics.json").write_text(report.to_json() + "\n")
    print(report.to_json())
    return 0


def _cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    model = ckpt.model
    if model.task is None or model.label_decoder is None:
        raise ConfigError("checkpoint has no task head; fine-tune it first")
    splits, n_vars = _load_splits(args.data)
    if model.config.n_variables != n_vars:
        raise ConfigError(
            f"checkpoint expects {model.config.n_variables} variables but the dataset has {n_vars}"
        )
    records = splits[args.split]
    if model.norm_stats is not None:
        records = zscore_apply(records, model.norm_stats)
    report = evaluate(model, records)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(report.to_json() + "\n")
        (out / "eval_config.json").write_text(json.dumps(
            {"checkpoint": str(args.checkpoint), "data": str(args.data), "split": args.split},
            sort_keys=True, indent=2) + "\n")
    print(report.to_json())
    return 0


def _parse_rates(text: str) -> list[float]:
    try:
        rates = [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"could not parse rates {text!r}") from None
    if not rates or any(not 0.0 < r <= 1.0 for r in rates):
        raise ConfigError(f"rates must lie in (0, 1], got {text!r}")
    return rates


def _parse_seeds(text: str) -> list[int]:
    try:
        seeds = [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise ConfigError(f"could not parse seeds {text!r}") from None
    if not seeds:
        raise ConfigError("need at least one seed")
    return seeds


def _cmd_sweep(args) -> int:
    rates = _parse_rates(args.rates)
    seeds = _parse_seeds(args.seeds)
    splits, n_vars = _load_splits(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    if args.sweep_mode == "test-only":
        if not args.checkpoint:
            raise ConfigError("test-only sweep needs --checkpoint")
        ckpt = load_checkpoint(args.checkpoint)
        model = ckpt.model
        if model.task is None or model.label_decoder is None:
            raise ConfigError("checkpoint has no task head; fine-tune it first")
        if model.config.n_variables != n_vars:
            raise ConfigError(
                f"checkpoint expects {model.config.n_variables} variables but the dataset has {n_vars}"
            )
    else:
        if args.checkpoint:
            raise ConfigError("retrain sweep trains from scratch; drop --checkpoint")
        model = None

    native = native_observed_rate(splits["test"])
    rows = []
    for rate in rates:
        keep = rate if not args.absolute else rate / native
        if keep > 1.0:
            print(f"warning: skipping rate {rate}: above the native observed rate {native:.4f}",
                  file=sys.stderr)
            continue
        for seed in seeds:
            if args.sweep_mode == "test-only":
                test_sub = subsample_observed(splits["test"], keep, seed)
                report = evaluate(model, zscore_apply(test_sub, model.norm_stats))
            else:
                cfg = _resolve_config(args.config, args.data, n_vars)
                cfg = _override_train(cfg, seed=seed)
                sub = {name: subsample_observed(split, keep, seed) for name, split in splits.items()}
                _, report = _train_variant(cfg, sub, None)
            rows.append([rate, seed, report.auprc, report.auroc, report.f1])
            print(f"rate {rate:.2f} seed {seed}: auprc {report.auprc:.4f} "
                  f"auroc {report.auroc:.4f} f1 {report.f1:.4f}")

    _write_csv(out / "sweep.csv", ["rate", "seed", "auprc", "auroc", "f1"], rows)
    summary = []
    for rate in sorted({row[0] for row in rows}):
        block = np.array([row[2:] for row in rows if row[0] == rate])
        means, stds = block.mean(axis=0), block.std(axis=0)
        summary.append([rate, means[0], stds[0], means[1], stds[1], means[2], stds[2]])
        print(f"rate {rate:.2f}: auprc {means[0]:.4f}+-{stds[0]:.4f} "
              f"auroc {means[1]:.4f}+-{stds[1]:.4f} f1 {means[2]:.4f}+-{stds[2]:.4f}")
    _write_csv(out / "sweep_summary.csv",
               ["rate", "auprc_mean", "auprc_std", "auroc_mean", "auroc_std", "f1_mean", "f1_std"],
               summary)
    (out / "sweep_config.json").write_text(json.dumps(
        {"checkpoint": args.checkpoint, "data": str(args.data), "rates": rates, "seeds": seeds,
         "mode": args.sweep_mode, "absolute": bool(args.absolute)},
        sort_keys=True, indent=2) + "\n")
    print(f"wrote {out / 'sweep.csv'}")
    return 0


def _cmd_ablate(args) -> int:
    valid = {f.name for f in fields(AblationFlags)}
    names = [tok.strip().replace("-", "_") for tok in args.variants.split(",") if tok.strip()]
    if not names:
        raise ConfigError("need at least one variant")
    for name in names:
        if name != "full" and name not in valid:
            raise ConfigError(f"unknown variant {name!r}; choose from full, {', '.join(sorted(valid))}")

    splits, n_vars = _load_splits(args.data)
    base = _resolve_config(args.config, args.data, n_vars)
    base = _override_train(base, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for name in names:
        flags = AblationFlags() if name == "full" else AblationFlags(**{name: True})
        vcfg = replace(base, ablation=flags)
        vdir = out / name
        vdir.mkdir(parents=True, exist_ok=True)
        print(f"== variant {name} ==")
        _, report = _train_variant(vcfg, splits, vdir, log_cb=_log_writer(vdir / "log.jsonl"))
        rows.append([name, report.auprc, report.auroc, report.f1, report.min_se_pplus])
        print(f"{name}: auprc {report.auprc:.4f} auroc {report.auroc:.4f} f1 {report.f1:.4f}")

    _write_csv(out / "ablate.csv", ["variant", "auprc", "auroc", "f1", "min_se_pplus"], rows)
    base.to_file(out / "config.ini")
    print(f"wrote {out / 'ablate.csv'}")
    return 0


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
