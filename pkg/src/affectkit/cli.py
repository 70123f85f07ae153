"""Command-line entry point: ``affectkit <command> [flags]``.

Exit status is 0 on success, 1 for invalid input or usage and 2 for I/O
failures. Output files are written atomically.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .augment import AugmentPolicy, balance_plan, materialize
from .checkpoint import FORMAT_VERSION, CheckpointError
from .data import (
    MANIFEST_VERSION,
    ImageDecodeError,
    ManifestError,
    atomic_write,
    au_pos_weights,
    class_distribution,
    expr_class_weights,
    format_stats,
    generate_synthetic,
    normalization_stats,
    parse_manifest,
    parse_stats,
    resolve,
)
from .ensemble import EnsembleSet, ensemble_evaluate
from .gradcheck import SUITES, gradient_check
from .schema import AU_NAMES, TASKS
from .trainer import TrainConfig, evaluate_model, fit, load_model, load_split, parse_config_text

FORMATS = (
    f"manifest format v{MANIFEST_VERSION} (CSV with header; MTL: path,valence,arousal,expression,"
    f"{','.join(AU_NAMES)}; LSD: path,expression); checkpoint format AFKT v{FORMAT_VERSION}"
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _common(p: argparse.ArgumentParser, manifest=True, task=True, out=True) -> None:
    if manifest:
        p.add_argument("--manifest", required=True, help="input manifest CSV")
    if task:
        p.add_argument("--task", choices=TASKS, required=True)
    if out:
        p.add_argument("--out", required=True, help="output file or directory")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=os.cpu_count() or 1, help="cap on worker threads")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="affectkit", description="Multi-task facial affect toolkit.", epilog=FORMATS)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic dataset", epilog=FORMATS)
    _common(p, manifest=False)
    p.add_argument("--per-class", type=int, default=40)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--unlabeled-rate", type=float, default=0.0, help="MTL: chance each task's label is blanked per row")

    p = sub.add_parser("stats", help="class counts, loss weights and normalisation statistics", epilog=FORMATS)
    _common(p)

    p = sub.add_parser("balance", help="oversample minority classes with RandAugment", epilog=FORMATS)
    _common(p)
    p.add_argument("--num-ops", type=int, default=2)
    p.add_argument("--magnitude", type=int, default=9)

    p = sub.add_parser("train", help="train a model", epilog=FORMATS)
    _common(p, task=False)
    p.add_argument("--task", choices=TASKS)
    p.add_argument("--config", help="key=value file with TrainConfig fields")
    p.add_argument("--val-manifest")
    p.add_argument("--resume", help="last.ckpt of an earlier run to continue")
    p.add_argument("--stats-file")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float, help="base learning rate")
    p.add_argument("--optimizer", choices=("adam", "sgd_momentum"))
    p.add_argument("--schedule", choices=("cosine", "constant"))
    p.add_argument("--smoothing", type=float)
    p.add_argument("--slots", type=int)
    p.add_argument("--deviation", choices=("on", "off"))
    p.add_argument("--init-checkpoint", help="checkpoint whose backbone initialises (and is frozen for) the deviation module")
    p.add_argument("--input-size", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="any other TrainConfig field")

    p = sub.add_parser("eval", help="score a checkpoint on a manifest", epilog=FORMATS)
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--stats-file")

    p = sub.add_parser("ensemble", help="score a probability-averaging ensemble", epilog=FORMATS)
    _common(p)
    p.add_argument("--checkpoints", nargs="+", required=True, help="member checkpoints, in order")
    p.add_argument("--stats-file", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification", epilog=FORMATS)
    p.add_argument("--suite", choices=SUITES, default="full")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", help="also write the report here")
    return parser


def _stats_report(manifest: str, task: str) -> str:
    records = parse_manifest(manifest, task)
    dist = class_distribution(records, task)
    lines = [f"task={task}", f"samples={len(records)}"]
    lines += [f"count.{n}={c}" for n, c in zip(dist.names, dist.counts.tolist())]
    lines.append(f"imbalance_ratio={dist.imbalance_ratio:.6f}")
    if (dist.counts > 0).all():
        lines += [f"weight.{n}={w:.6f}" for n, w in zip(dist.names, expr_class_weights(dist))]
    if task == "mtl":
        try:
            lines += [f"au_weight.{n}={w:.6f}" for n, w in zip(AU_NAMES, au_pos_weights(records))]
        except ValueError as exc:
            lines.append(f"au_weight=unavailable ({exc})")
    mean, std = normalization_stats([resolve(manifest, r) for r in records])
    lines.append("mean=" + ",".join(repr(float(v)) for v in mean))
    lines.append("std=" + ",".join(repr(float(v)) for v in std))
    return "\n".join(lines) + "\n"


def _train_config(args) -> TrainConfig:
    text = Path(args.config).read_text(encoding="utf-8") if args.config else ""
    overrides = {}
    for item in args.set:
        k, sep, v = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        overrides[k.strip()] = v
    flag_map = {
        "task": "task",
        "epochs": "epochs",
        "batch_size": "batch_size",
        "lr": "base_lr",
        "optimizer": "optimizer",
        "schedule": "schedule",
        "smoothing": "smoothing",
        "slots": "slots",
        "deviation": "deviation",
        "init_checkpoint": "init_checkpoint",
        "input_size": "input_size",
        "eval_every": "eval_every",
        "stats_file": "stats_file",
    }
    for flag, key in flag_map.items():
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = str(value)
    overrides["checkpoint"] = args.out
    overrides["seed"] = str(args.seed)
    return parse_config_text(text, overrides)


def _stats_for(args, checkpoint: str | None = None):
    if args.stats_file:
        return parse_stats(Path(args.stats_file).read_text(encoding="utf-8"))
    if checkpoint:
        sidecar = Path(checkpoint).parent / "stats.txt"
        if sidecar.exists():
            return parse_stats(sidecar.read_text(encoding="utf-8"))
    records = parse_manifest(args.manifest, args.task)
    return normalization_stats([resolve(args.manifest, r) for r in records])


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    except SystemExit as exc:  # --help and --version
        return exc.code if isinstance(exc.code, int) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _dispatch(args)
    except (UsageError, ValueError, ManifestError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ImageDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "synth":
        manifest = generate_synthetic(args.out, args.task, args.per_class, args.size, args.seed, args.unlabeled_rate)
        print(f"wrote {manifest}")
    elif cmd == "stats":
        text = _stats_report(args.manifest, args.task)
        atomic_write(args.out, text)
        sys.stdout.write(text)
    elif cmd == "balance":
        records = parse_manifest(args.manifest, args.task)
        dist = class_distribution(records, args.task)
        plan = balance_plan(dist, records, args.seed)
        policy = AugmentPolicy(args.num_ops, args.magnitude, args.seed)
        out = materialize(plan, policy, records, args.manifest, args.out, args.task)
        print(f"wrote {out} ({len(records)} originals + {len(plan)} augmented, {plan.max_count} per class)")
    elif cmd == "train":
        cfg = _train_config(args)
        result = fit(cfg, args.manifest, args.val_manifest, args.resume)
        sys.stdout.write(Path(result.history_path).read_text(encoding="utf-8"))
        print(f"best={result.best} last={result.last}")
    elif cmd == "eval":
        model = load_model(args.checkpoint)
        mean, std = _stats_for(args, args.checkpoint)
        split = load_split(args.manifest, args.task, mean, std, model.cfg.input_size)
        if model.task_mode != args.task:
            raise ValueError(f"checkpoint is a {model.task_mode} model, --task is {args.task}")
        text = evaluate_model(model, split).to_text()
        atomic_write(args.out, text)
        sys.stdout.write(text)
    elif cmd == "ensemble":
        ens = EnsembleSet.load(args.checkpoints)
        mean, std = _stats_for(args)
        split = load_split(args.manifest, args.task, mean, std, ens.members[0].cfg.input_size)
        text = ensemble_evaluate(ens, split, args.task, threads=args.threads).to_text()
        atomic_write(args.out, text)
        sys.stdout.write(text)
    elif cmd == "gradcheck":
        report = gradient_check(args.suite, args.seed)
        text = report.to_text()
        if args.out:
            atomic_write(args.out, text)
        sys.stdout.write(text)
        return 0 if report.passed else 1
    return 0


def main() -> None:
    np.seterr(over="ignore", under="ignore")
    sys.exit(run())


if __name__ == "__main__":
    main()
