"""Command-line entry point: gen-data, train, eval, diagnose.

Exit codes: 0 success, 1 invalid configuration, 2 I/O failure, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import yaml

from .autograd import NonFiniteError
from .checkpoint import load_checkpoint, save_checkpoint
from .config import PROFILES, ConfigError, TrainConfig
from .data import SPPFError, SyntheticConfig, gen_synthetic, read_sppf, split_indices, write_sppf
from .diagnostics import export_embeddings
from .losses import MODES
from .optim import NumericalError
from .train import evaluate, fit

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("sppscl")

TRAIN_FLAGS = {
    "lambda": ("lam", float), "tau": ("tau", float), "alpha": ("alpha", float),
    "dim": ("dim", int), "lr": ("lr", float), "decay-period": ("decay_period", int),
    "decay-mult": ("decay_mult", float), "weight-decay": ("weight_decay", float),
    "dropout": ("dropout", float), "batch-size": ("batch_size", int), "epochs": ("epochs", int),
    "eval-batch-size": ("eval_batch_size", int),
}
SYNTH_FLAGS = {
    "samples": ("samples", int), "classes": ("classes", int), "latent-dim": ("latent_dim", int),
    "gap": ("gap", float), "noise": ("noise", float), "margin": ("margin", float),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ConfigError("config", f"{path}: expected a key-value mapping at top level")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def _resolve_seed(args, file_cfg: dict) -> int:
    if args.seed is not None:
        return args.seed
    if "seed" in file_cfg:
        return int(file_cfg["seed"])
    env = os.environ.get("SPP_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ConfigError("seed", f"SPP_SEED must be an integer, got {env!r}") from None
    return 0


def _train_config(args) -> TrainConfig:
    file_cfg = _load_config_file(args.config)
    if "lambda" in file_cfg:
        file_cfg["lam"] = file_cfg.pop("lambda")
    train_keys = {f.name for f in fields(TrainConfig)}
    values = {}
    profile = args.profile or file_cfg.pop("profile", None)
    if profile is not None:
        if profile not in PROFILES:
            raise ConfigError("profile", f"unknown profile {profile!r}; choose from {sorted(PROFILES)}")
        values.update(PROFILES[profile])
    values.update({k: v for k, v in file_cfg.items() if k in train_keys})
    for flag, (key, _) in TRAIN_FLAGS.items():
        val = getattr(args, flag.replace("-", "_"), None)
        if val is not None:
            values[key] = val
    if getattr(args, "mode", None):
        values["mode"] = args.mode
    if getattr(args, "staged", False):
        values["staged"] = True
    values["seed"] = _resolve_seed(args, file_cfg)
    return TrainConfig(**values)


def _synthetic_config(args) -> SyntheticConfig:
    file_cfg = _load_config_file(args.config)
    keys = {f.name for f in fields(SyntheticConfig)}
    values = {k: v for k, v in file_cfg.items() if k in keys}
    for flag, (key, _) in SYNTH_FLAGS.items():
        val = getattr(args, flag.replace("-", "_"), None)
        if val is not None:
            values[key] = val
    values["seed"] = _resolve_seed(args, file_cfg)
    try:
        cfg = SyntheticConfig(**values)
        cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError("synthetic", str(exc)) from exc
    return cfg


def _write_json(path, record: dict) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(record, sort_keys=True) + "\n")
    os.replace(tmp, path)


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


# ---------------------------------------------------------------- subcommands

def cmd_gen_data(args) -> int:
    cfg = _synthetic_config(args)
    result = gen_synthetic(cfg)
    write_sppf(result.dataset, args.out)
    summary = {"path": str(args.out), **result.dataset.extents,
               "probe_accuracy": result.probe_accuracy, "seed": cfg.seed}
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    config = _train_config(args)
    dataset = read_sppf(_require(args.data, "dataset"))
    metrics_path = Path(args.metrics) if args.metrics else Path(str(args.out) + ".metrics.jsonl")
    lines = []

    def on_epoch(record):
        lines.append(json.dumps(record, sort_keys=True))

    result = fit(dataset, config, on_epoch=on_epoch)
    save_checkpoint(args.out, result.model, config,
                    {"best_epoch": result.best_epoch, "split_seed": config.seed,
                     "num_samples": len(dataset)})
    tmp = metrics_path.with_name(metrics_path.name + ".tmp")
    tmp.write_text("".join(line + "\n" for line in lines))
    os.replace(tmp, metrics_path)
    print(json.dumps({"checkpoint": str(args.out), "metrics": str(metrics_path),
                      "epochs": config.epochs, "best_epoch": result.best_epoch,
                      "mode": config.mode, "lam": config.lam, "lr": config.lr,
                      "decay_period": config.decay_period, "decay_mult": config.decay_mult,
                      "batch_size": config.batch_size}, sort_keys=True))
    return EXIT_OK


def _load_for_eval(args):
    model, config, meta = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    dataset = read_sppf(_require(args.data, "dataset"))
    e = dataset.extents
    spec = model.spec
    if (e["C_i"], e["C_t"], e["K"]) != (spec.image_channels, spec.text_channels, spec.num_classes):
        raise ConfigError(
            "checkpoint",
            f"checkpoint expects (C_i, C_t, K) = {(spec.image_channels, spec.text_channels, spec.num_classes)}"
            f" but dataset has {(e['C_i'], e['C_t'], e['K'])}")
    if args.eval_batch_size is not None:
        config = config.replace(eval_batch_size=args.eval_batch_size)
    if args.split == "all":
        subset = dataset
    else:
        splits = split_indices(len(dataset), meta.get("split_seed", config.seed))
        subset = dataset.subset(splits[args.split])
    return model, config, subset


def cmd_eval(args) -> int:
    model, config, subset = _load_for_eval(args)
    result = evaluate(model, subset, config)
    record = {"split": args.split, "samples": len(subset),
              "eval_batch_size": config.effective_eval_batch_size, **result.as_dict()}
    print(json.dumps(record, sort_keys=True))
    if args.out:
        _write_json(args.out, record)
    return EXIT_OK


def cmd_diagnose(args) -> int:
    model, config, subset = _load_for_eval(args)
    result = evaluate(model, subset, config)
    record = {"split": args.split, "samples": len(subset), **result.distances.as_dict()}
    emb_path = Path(args.embeddings) if args.embeddings else Path(str(args.out) + ".embeddings.tsv")
    tmp = emb_path.with_name(emb_path.name + ".tmp")
    export_embeddings(result.image, result.text, result.labels, tmp)
    os.replace(tmp, emb_path)
    _write_json(args.out, record)
    print(json.dumps({**record, "embeddings": str(emb_path)}, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="sppscl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML/JSON key-value file")
        p.add_argument("--seed", type=int)

    gen = sub.add_parser("gen-data", help="write a synthetic SPPF feature file")
    common(gen)
    for flag, (_, typ) in SYNTH_FLAGS.items():
        gen.add_argument(f"--{flag}", type=typ)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen_data)

    train = sub.add_parser("train", help="train and write a checkpoint plus metrics log")
    common(train)
    for flag, (_, typ) in TRAIN_FLAGS.items():
        train.add_argument(f"--{flag}", type=typ)
    train.add_argument("--mode", choices=MODES)
    train.add_argument("--profile", choices=sorted(PROFILES))
    train.add_argument("--staged", action="store_true",
                       help="phase 1 for all epochs, then one gate check and optional fine-tune")
    train.add_argument("--data", required=True)
    train.add_argument("--out", required=True, help="checkpoint path")
    train.add_argument("--metrics", help="metrics log path (default: <out>.metrics.jsonl)")
    train.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "classification metrics on a split"),
                                 ("diagnose", cmd_diagnose, "distance report and embedding export")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--data", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
        p.add_argument("--eval-batch-size", type=int)
        p.add_argument("--out", required=(name == "diagnose"))
        if name == "diagnose":
            p.add_argument("--embeddings", help="export path (default: <out>.embeddings.tsv)")
        p.set_defaults(func=func)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # usage errors and --help
        return exc.code if isinstance(exc.code, int) else EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "eval_batch_size", None) is not None and args.eval_batch_size < 1:
            raise ConfigError("eval_batch_size", "eval_batch_size must be >= 1")
        return args.func(args)
    except (FloatingPointError, NumericalError, NonFiniteError) as exc:
        print(f"sppscl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigError as exc:
        print(f"sppscl: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, SPPFError) as exc:
        print(f"sppscl: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, TypeError) as exc:
        print(f"sppscl: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
