"""Command-line surface: synth, train, eval, extract, gradcheck.

Exit codes are a stable contract: 0 success, 1 verification failure, 2 io
problem, 3 numeric abort, 4 configuration error.
"""

from __future__ import annotations

import argparse
import contextlib
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from . import metrics as metrics_mod
from .config import RunConfig, load_run_config, tiny_verification_config
from .errors import (
    ConfigError,
    DataError,
    FormatError,
    LoadError,
    NumericError,
    VitGruError,
)
from .gradcheck import grad_check
from .model import Model, ModelConfig
from .rng import substream
from .tensor import Tensor
from .train import Adam, checkpoint_load, cross_entropy, train

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_IO = 2
EXIT_NUMERIC = 3
EXIT_CONFIG = 4


@contextlib.contextmanager
def output_lock(out_dir: Path):
    """Guard an output directory against concurrent writers via a lock file."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise OSError(f"output directory {out_dir} is locked by another run (remove {lock} if stale)")
    try:
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _prepare_dataset(config: RunConfig):
    if not config.data.root:
        raise ConfigError("config needs data.root pointing at the dataset directory")
    index = data_mod.scan_dataset(config.data.root)
    index = data_mod.stratified_split(index, config.data.split_ratio, config.seed)
    size = config.model.vit.image_size
    train_samples = data_mod.load_samples(index, "train", size)
    test_samples = data_mod.load_samples(index, "test", size)
    return index, train_samples, test_samples


def cmd_synth(args) -> int:
    index = data_mod.synth_generate(
        args.out, per_class=args.per_class, num_classes=args.classes,
        image_size=args.image_size, seed=args.seed,
    )
    for name, count in index.counts().items():
        print(f"{name}: {count}")
    print(f"total: {len(index.records)}")
    return EXIT_OK


def cmd_train(args) -> int:
    config = load_run_config(args.config)
    out_dir = Path(config.out_dir)
    with output_lock(out_dir):
        index, train_samples, test_samples = _prepare_dataset(config)
        if index.skipped:
            (out_dir / "skip_report.json").write_text(json.dumps(index.skipped, indent=2))
        model = Model(config.model, seed=config.seed)
        ckpt = config.train.checkpoint_path or str(out_dir / "best.ckpt")
        train_cfg = dataclasses.replace(config.train, checkpoint_path=ckpt)
        log_path = out_dir / "log.jsonl"
        if args.resume is None and log_path.exists():
            log_path.unlink()
        log = train(
            model, train_samples, test_samples, train_cfg,
            augment=config.augment, log_path=log_path, resume_from=args.resume,
        )
        report, _ = metrics_mod.evaluate_model(model, test_samples)
        (out_dir / "report.json").write_text(metrics_mod.report_to_json(report, index.class_names))
        print(metrics_mod.render_table(report, index.class_names))
        best = max((r["test_top1"] for r in log), default=0.0)
        final = log[-1]["test_top1"] if log else 0.0
        print(f"\nepochs: {len(log)}  best test top-1: {100 * best:.2f}%  final: {100 * final:.2f}%")
        print(f"log: {log_path}\ncheckpoint: {ckpt}")
    return EXIT_OK


def cmd_eval(args) -> int:
    config = load_run_config(args.config)
    index, train_samples, test_samples = _prepare_dataset(config)
    model = Model(config.model, seed=config.seed)
    checkpoint_load(args.ckpt, model)
    samples = test_samples if args.split == "test" else train_samples
    report, _ = metrics_mod.evaluate_model(model, samples)
    print(metrics_mod.render_table(report, index.class_names))
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"report_{args.split}.json").write_text(
        metrics_mod.report_to_json(report, index.class_names)
    )
    return EXIT_OK


def cmd_extract(args) -> int:
    config = load_run_config(args.config)
    _, train_samples, test_samples = _prepare_dataset(config)
    model = Model(config.model, seed=config.seed)
    checkpoint_load(args.ckpt, model)
    samples = test_samples if args.split == "test" else train_samples
    count = metrics_mod.export_embeddings(model, samples, args.out)
    print(f"wrote {count} embedding rows to {args.out}")
    return EXIT_OK


def _gradcheck_groups(model: Model) -> dict[str, list]:
    groups: dict[str, list] = {}
    for name, tensor in model.named_parameters().items():
        if name.startswith("vit.block."):
            group = ".".join(name.split(".")[:3])
        elif name.startswith("vit."):
            group = "vit.embedding"
        else:
            group = ".".join(name.split(".")[:2])
        groups.setdefault(group, []).append(tensor)
    return groups


def cmd_gradcheck(args) -> int:
    if args.config:
        config = load_run_config(args.config)
        model_cfg = dataclasses.replace(config.model, dtype="float64")
        seed = config.seed
    else:
        config = tiny_verification_config()
        model_cfg = config.model
        seed = config.seed
    model = Model(model_cfg, seed=seed)
    rng = substream(seed, "gradcheck")
    image = rng.uniform(0.0, 1.0, size=(model_cfg.vit.image_size,) * 2 + (model_cfg.vit.channels,))
    label = np.array([rng.integers(model_cfg.head.num_classes)])

    def loss_fn(tape):
        logits = model.forward(tape, image)
        row = tape.reshape(logits, (1, model_cfg.head.num_classes))
        return cross_entropy(tape, row, label)

    all_ok = True
    for group, tensors in sorted(_gradcheck_groups(model).items()):
        trainable = [t for t in tensors if t.requires_grad]
        if not trainable:
            print(f"{group:<24} skipped (frozen)")
            continue
        reports = grad_check(loss_fn, trainable, step=args.step, tol=args.tol)
        worst = max(r.max_rel_err for r in reports)
        entries = sum(r.entries for r in reports)
        ok = all(r.passed for r in reports)
        all_ok &= ok
        print(f"{group:<24} max rel err {worst:.3e} over {entries} entries: {'ok' if ok else 'FAIL'}")
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vitgru",
        description="Train, evaluate, and inspect the patch-transformer + bidirectional GRU classifier.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    fmt = argparse.ArgumentDefaultsHelpFormatter

    p = sub.add_parser("synth", help="generate a synthetic class-separable dataset", formatter_class=fmt)
    p.add_argument("--out", required=True, help="target directory for the class folders")
    p.add_argument("--per-class", type=int, default=20, help="images per class")
    p.add_argument("--classes", type=int, default=3, help="number of classes")
    p.add_argument("--image-size", type=int, default=224, help="square image size in pixels")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="run the training loop from a JSON config", formatter_class=fmt)
    p.add_argument("--config", required=True, help="path to the run config JSON")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint and print the class table", formatter_class=fmt)
    p.add_argument("--config", required=True, help="path to the run config JSON")
    p.add_argument("--ckpt", required=True, help="checkpoint to evaluate")
    p.add_argument("--split", choices=("train", "test"), default="test", help="which split to score")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("extract", help="export pooled embeddings to CSV", formatter_class=fmt)
    p.add_argument("--config", required=True, help="path to the run config JSON")
    p.add_argument("--ckpt", required=True, help="checkpoint to load")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--split", choices=("train", "test"), default="test", help="which split to export")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser(
        "gradcheck",
        help="verify analytic gradients against finite differences (64-bit)",
        formatter_class=fmt,
    )
    p.add_argument("--config", default=None,
                   help="run config JSON; defaults to the built-in tiny verification geometry")
    p.add_argument("--tol", type=float, default=1e-4, help="max relative error per group")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    p.set_defaults(fn=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (LoadError, FormatError, DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except VitGruError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
