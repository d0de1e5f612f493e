"""Command-line entry point: ``intlearn {train,eval,inspect,preprocess}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .blocks import PRESETS, UnknownPresetError
from .data import (
    DATA_DIR_ENV,
    NormStats,
    NormalizedDataset,
    RawDataset,
    apply_stats,
    compute_stats,
    load_dataset,
    to_grayscale,
)
from .itensor import IntegerOverflowError, intdiv
from .train import (
    CheckpointError,
    TrainConfig,
    TrainState,
    Telemetry,
    bitwidth_report,
    build_for_config,
    evaluate,
    fit,
    format_report,
    load_checkpoint,
    save_checkpoint,
)

log = logging.getLogger("intlearn")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# flags that map one-to-one onto TrainConfig fields
OVERRIDE_FLAGS = ("preset", "dataset", "data_dir", "seed", "epochs", "limit", "test_limit",
                  "threads", "batch_size", "gamma_inv", "eta_fw", "eta_lr", "d_lr", "p_c", "p_l",
                  "alpha_inv", "patience", "min_delta", "fw_rule", "head_shift")


class UsageError(Exception):
    pass


def read_config_file(path) -> dict:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise UsageError(f"{path}: top level must be an object")
    return data


def resolve_config(args) -> tuple[TrainConfig, str | None]:
    """Merge tuned defaults, the config file and command-line overrides (in that order)."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    out = file_values.pop("out", None)
    values = dict(file_values)
    for name in OVERRIDE_FLAGS:
        value = getattr(args, name, None)
        if value is not None:
            values[name] = value
    for item in getattr(args, "set", None) or []:
        key, _, raw = item.partition("=")
        values[key.strip()] = json.loads(raw) if raw.strip()[:1] in "-0123456789[{\"tfn" else raw
    if getattr(args, "out", None):
        out = args.out
    preset = values.pop("preset", "MLP1")
    dataset = values.pop("dataset", "mnist")
    if preset not in PRESETS:
        raise UsageError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    known = {f.name for f in fields(TrainConfig)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {unknown}")
    try:
        return TrainConfig.for_experiment(preset, dataset, **values), out
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def _prepare_images(raw: RawDataset, preset: str) -> RawDataset:
    want = PRESETS[preset].get("input_features")
    images = raw.images
    if want is not None and images.shape[1] == 3 and images[0].size != want:
        images = to_grayscale(images)
    return RawDataset(images, raw.labels, raw.class_count)


def load_splits(config: TrainConfig):
    try:
        train = load_dataset(config.dataset, "train", config.data_dir).subset(config.limit)
        test = load_dataset(config.dataset, "test", config.data_dir).subset(config.test_limit)
    except FileNotFoundError as exc:
        raise UsageError(f"{exc} (set --data-dir or ${DATA_DIR_ENV})") from None
    train, test = _prepare_images(train, config.preset), _prepare_images(test, config.preset)
    stats = compute_stats(train.images)
    return (NormalizedDataset(apply_stats(train.images, stats), train.labels, stats, train.class_count),
            NormalizedDataset(apply_stats(test.images, stats), test.labels, stats, test.class_count))


def cmd_train(args) -> int:
    config, out = resolve_config(args)
    out_dir = Path(out or "runs/latest")
    out_dir.mkdir(parents=True, exist_ok=True)
    metrics_path = out_dir / "metrics.jsonl"
    if metrics_path.exists():
        metrics_path.unlink()
    train_set, test_set = load_splits(config)
    network = build_for_config(config, train_set.images.shape[1:], train_set.class_count)
    log.info("\n".join(network.describe()))
    log.info("normalization: mu=%d omega=%d", train_set.stats.mu, train_set.stats.omega)
    state = TrainState(gamma_inv=config.gamma_inv)
    telemetry = Telemetry()
    fit(network, train_set, test_set, config, state, telemetry, metrics_path)
    ckpt = out_dir / "checkpoint.ntrd"
    save_checkpoint(network, state, ckpt, config, norm=train_set.stats)
    final = state.test_acc[-1] if state.test_acc else evaluate(network, test_set)
    print(f"final test accuracy: {final} bp (best {state.best_test_acc} bp)")
    print(f"checkpoint: {ckpt}")
    print(f"metrics: {metrics_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        network, state, config, norm = load_checkpoint(args.checkpoint, with_norm=True)
    except FileNotFoundError:
        raise UsageError(f"checkpoint not found: {args.checkpoint}") from None
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None
    config = config or TrainConfig(preset=network.name)
    dataset = args.dataset or config.dataset
    data_dir = args.data_dir or config.data_dir
    limit = args.limit if args.limit is not None else config.test_limit
    try:
        raw = load_dataset(dataset, "test", data_dir).subset(limit)
    except FileNotFoundError as exc:
        raise UsageError(f"{exc} (set --data-dir or ${DATA_DIR_ENV})") from None
    raw = _prepare_images(raw, network.name)
    if tuple(raw.images.shape[1:]) != network.input_shape:
        raise UsageError(f"dataset images {tuple(raw.images.shape[1:])} do not match the "
                         f"network input {network.input_shape}")
    if norm is None:
        norm = compute_stats(load_dataset(dataset, "train", data_dir).subset(config.limit).images)
    test = NormalizedDataset(apply_stats(raw.images, norm), raw.labels, norm, raw.class_count)
    acc = evaluate(network, test)
    print(f"test accuracy: {acc} bp ({intdiv(acc, 100)}.{acc % 100:02d}%) on {len(test)} samples")
    return EXIT_OK


def cmd_inspect(args) -> int:
    telemetry = None
    if args.target and Path(args.target).suffix != ".json":
        try:
            network, state, _ = load_checkpoint(args.target)
        except FileNotFoundError:
            raise UsageError(f"checkpoint not found: {args.target}") from None
        except CheckpointError as exc:
            raise UsageError(str(exc)) from None
        if state is not None and state.telemetry:
            telemetry = Telemetry.from_dict(state.telemetry)
    else:
        if args.target:
            args.config = args.target
        config, _ = resolve_config(args)
        shape = tuple(args.input_shape) if args.input_shape else _default_shape(config)
        network = build_for_config(config, shape)
    print("\n".join(network.describe()))
    print(format_report(bitwidth_report(network, telemetry)))
    if telemetry is None or not telemetry.record:
        print("(no telemetry recorded: analytical bounds only)")
    return EXIT_OK


def _default_shape(config: TrainConfig) -> tuple:
    want = PRESETS[config.preset].get("input_features")
    if want == 784:
        return (1, 28, 28)
    if want == 1024:
        return (1, 32, 32)
    return (3, 32, 32) if config.dataset == "cifar10" else (1, 28, 28)


def cmd_preprocess(args) -> int:
    config, out = resolve_config(args)
    try:
        train = load_dataset(config.dataset, "train", config.data_dir).subset(config.limit)
        test = load_dataset(config.dataset, "test", config.data_dir).subset(config.test_limit)
    except FileNotFoundError as exc:
        raise UsageError(f"{exc} (set --data-dir or ${DATA_DIR_ENV})") from None
    stats = compute_stats(train.images)
    report = {"dataset": config.dataset, "mu_int": stats.mu, "omega_int": stats.omega}
    for split, raw in (("train", train), ("test", test)):
        post = compute_stats(apply_stats(raw.images, stats)) if len(raw) else NormStats(0, 0)
        report[split] = {"samples": len(raw), "mean": post.mu, "mad": post.omega}
    text = json.dumps(report, indent=2)
    print(text)
    if out:
        Path(out).write_text(text + "\n")
    return EXIT_OK


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file with TrainConfig keys (plus 'out')")
    p.add_argument("--preset", help=f"architecture: {', '.join(PRESETS)}")
    p.add_argument("--dataset", help="mnist, fashionmnist or cifar10")
    p.add_argument("--data-dir", dest="data_dir", help=f"dataset root (default ${DATA_DIR_ENV} or ./data)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--limit", type=int, help="cap on training samples")
    p.add_argument("--test-limit", dest="test_limit", type=int, help="cap on test samples")
    p.add_argument("--threads", type=int, help="worker threads for block updates")
    p.add_argument("--out", help="output directory (train) or stats file (preprocess)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override any config key, e.g. --set gamma_inv=1024")
    for name in ("batch_size", "gamma_inv", "eta_fw", "eta_lr", "d_lr", "p_c", "p_l", "alpha_inv",
                 "patience", "min_delta", "head_shift"):
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=int, help=argparse.SUPPRESS)
    p.add_argument("--fw-rule", dest="fw_rule", help=argparse.SUPPRESS)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="intlearn", description="Integer-only network training")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a network and write metrics + checkpoint")
    _add_common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a test split")
    p.add_argument("checkpoint")
    p.add_argument("--dataset")
    p.add_argument("--data-dir", dest="data_dir")
    p.add_argument("--limit", type=int, help="cap on test samples")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="print architecture and bit-width report")
    p.add_argument("target", nargs="?", help="checkpoint file or JSON config")
    _add_common(p)
    p.add_argument("--input-shape", dest="input_shape", type=int, nargs="+")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("preprocess", help="compute normalization statistics")
    _add_common(p)
    p.set_defaults(func=cmd_preprocess)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, UnknownPresetError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except IntegerOverflowError as exc:
        print(f"overflow: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
