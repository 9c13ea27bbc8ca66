"""``map`` command line: pretrain, finetune, eval, mask-dump, make-data, ablate.

Exit codes: 0 ok, 1 usage/config error, 2 data or IO error, 3 numeric failure.
Logs go to stderr as one ``key=value`` line per event; results go to files or
stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import numerics as nx
from .config import ConfigError, TrainConfig, help_text, load_config, parse_overrides
from .data import ArchiveError, synth_dataset, write_archive
from .masking import (DecoderStrategy, MaskStrategy, ScanKind, build_mask_plan,
                      build_visibility)
from .trainer import (CheckpointError, IncompatibleCheckpointError, deterministic_requested,
                      emit, evaluate, finetune, load_checkpoint, load_classifier, load_images,
                      parse_grid, pretrain, run_ablation_grid, split_holdout)

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):          # argparse would exit 2, which means IO here
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.RawDescriptionHelpFormatter(prog, width=100, max_help_position=30)


def _grid(text: str) -> tuple[int, int]:
    try:
        rows, cols = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 8x8, got {text!r}") from None
    if rows < 1 or cols < 1:
        raise argparse.ArgumentTypeError("grid sides must be >= 1")
    return rows, cols


def _pair(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise argparse.ArgumentTypeError(f"expected key=value, got {text!r}")
    k, v = text.split("=", 1)
    return k.strip(), v.strip()


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="map", description="Masked autoregressive pretraining for hybrid "
                "SSM/attention vision backbones.", epilog=help_text(), formatter_class=_formatter)
    p.add_argument("--log-level", default="info", choices=["debug", "info", "warning", "error"])
    sub = p.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True

    def command(name, helptext):
        c = sub.add_parser(name, help=helptext, description=helptext, epilog=help_text(),
                           formatter_class=_formatter)
        c.add_argument("--config", type=Path, help="key=value config file")
        c.add_argument("--seed", type=int, help="overrides the config seed")
        c.add_argument("--set", type=_pair, action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        return c

    c = command("pretrain", "MAP (or ablation-objective) pretraining")
    c.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    c.add_argument("--resume", type=Path, help="continue from a pretraining checkpoint")
    c.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")

    c = command("finetune", "classification finetuning with a mean-pool + linear head")
    c.add_argument("--init", type=Path, help="pretraining checkpoint (default: from scratch)")
    c.add_argument("--out", type=Path, help="output directory (default: config output_dir)")

    c = command("eval", "held-out accuracy of a finetune checkpoint")
    c.add_argument("--checkpoint", type=Path, required=True)

    c = command("mask-dump", "print a decoder visibility matrix")
    c.add_argument("--grid", type=_grid, default=(8, 8), help="ROWSxCOLS token grid")
    c.add_argument("--ratio", type=float, default=0.5, help="mask ratio")
    c.add_argument("--strategy", default="map", help="decoder visibility: ar | mae | localmae | map")
    c.add_argument("--mask-strategy", default="random", choices=[s.value for s in MaskStrategy])
    c.add_argument("--order", default="row_first", choices=[s.value for s in ScanKind])
    c.add_argument("--format", default="csv", choices=["csv", "pbm"])
    c.add_argument("--output", type=Path, help="file to write (default: stdout)")

    c = command("make-data", "write a synthetic dataset archive")
    c.add_argument("--out", type=Path, required=True)
    c.add_argument("--count", type=int, help="images (default: config num_images)")

    c = command("ablate", "run an ablation grid and write a results CSV")
    c.add_argument("--grid", required=True,
                   help="decoder_mask | mask_strategy | mask_ratio | scan_order | ar_ratio | "
                        "pattern, or 'key=v1,v2;key2=a,b'")
    c.add_argument("--out", type=Path, help="results CSV (default: <output_dir>/ablate.csv)")
    c.add_argument("--no-finetune", action="store_true", help="pretrain cells only")
    return p


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = parse_overrides(dict(args.set), "--set")
    if args.seed is not None:
        overrides["seed"] = args.seed
    return cfg.replace(**overrides) if overrides else cfg


def _setup_logging(level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("level=%(levelname)s %(message)s"))
    root = logging.getLogger("mapretrain")
    root.handlers[:] = [handler]
    root.setLevel(level.upper())
    root.propagate = False


def cmd_pretrain(args, cfg: TrainConfig) -> int:
    out = args.out or Path(cfg.output_dir) / "pretrain"
    res = pretrain(cfg.replace(mode="pretrain"), out, resume=args.resume, max_steps=args.max_steps)
    print(json.dumps({"checkpoint": str(res.checkpoint), "metrics": str(res.metrics),
                      "final_mse": res.history[-1]["total_mse"] if res.history else None,
                      "skipped": res.skipped}))
    return EXIT_OK


def cmd_finetune(args, cfg: TrainConfig) -> int:
    init = args.init if args.init is not None else (cfg.init_checkpoint or None)
    out = args.out or Path(cfg.output_dir) / "finetune"
    rep = finetune(cfg.replace(mode="finetune"), init, out_dir=out)
    print(json.dumps({"accuracy": rep.accuracy, "train_accuracy": rep.train_accuracy,
                      "steps": rep.steps, "init": rep.init, "checkpoint": str(out / "finetune.ckpt")}))
    return EXIT_OK


def cmd_eval(args, cfg: TrainConfig) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    saved = ckpt.train_config
    # data settings come from the command line when given, else from the checkpoint
    data_cfg = cfg if (args.config or args.set) else saved
    images, labels = load_images(data_cfg)
    model, _ = load_classifier(ckpt, images.shape[1:])
    _, held = split_holdout(labels, data_cfg.holdout_frac, data_cfg.data_seed)
    acc = evaluate(model, images[held], labels[held], saved.patch)
    emit("eval", accuracy=acc, images=len(held))
    print(json.dumps({"accuracy": acc, "images": int(len(held))}))
    return EXIT_OK


def cmd_mask_dump(args, cfg: TrainConfig) -> int:
    rows, cols = args.grid
    seed = args.seed if args.seed is not None else cfg.seed
    try:
        strategy = DecoderStrategy.parse(args.strategy)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if not 0.0 <= args.ratio <= 1.0:
        raise UsageError(f"--ratio must lie in [0, 1], got {args.ratio}")
    plan = build_mask_plan(rows, cols, args.ratio, args.mask_strategy, seed, args.order)
    vis = build_visibility(plan, strategy, args.order, cfg.self_visible)
    text = vis.to_csv() if args.format == "csv" else vis.to_pbm()
    if args.output:
        args.output.write_text(text)
    else:
        sys.stdout.write(text)
    emit("mask_dump", grid=f"{rows}x{cols}", strategy=strategy.value, masked=plan.count)
    return EXIT_OK


def cmd_make_data(args, cfg: TrainConfig) -> int:
    count = args.count if args.count is not None else cfg.num_images
    seed = args.seed if args.seed is not None else cfg.data_seed
    size = (cfg.channels, cfg.image_size, cfg.image_size)
    n = write_archive(args.out, synth_dataset(seed, count, cfg.num_classes, size, cfg.pixel_noise))
    emit("make_data", path=str(args.out), images=n)
    print(json.dumps({"path": str(args.out), "images": n}))
    return EXIT_OK


def cmd_ablate(args, cfg: TrainConfig) -> int:
    grid = parse_grid(args.grid)
    out = args.out or Path(cfg.output_dir) / "ablate.csv"
    work = out.parent / (out.stem + "_cells")
    rows = run_ablation_grid(cfg, grid, out, work, finetune_cells=not args.no_finetune)
    failed = sum(r["status"] != "ok" for r in rows)
    print(json.dumps({"results": str(out), "cells": len(rows), "failed": failed}))
    return EXIT_OK


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "eval": cmd_eval,
            "mask-dump": cmd_mask_dump, "make-data": cmd_make_data, "ablate": cmd_ablate}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:          # --help
        return int(e.code or 0)
    _setup_logging(args.log_level)
    try:
        cfg = resolve_config(args)
        if deterministic_requested():
            emit("deterministic", threads=1)
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as e:
        emit("error", kind="usage", message=str(e))
        return EXIT_USAGE
    except (nx.NumericError, nx.DegenerateMaskError, FloatingPointError) as e:
        emit("error", kind="numeric", message=str(e))
        return EXIT_NUMERIC
    except (OSError, ArchiveError, CheckpointError, IncompatibleCheckpointError,
            UnicodeDecodeError, json.JSONDecodeError) as e:
        emit("error", kind="io", message=str(e))
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
