"""Command-line entry point: gen-superpixels, train-ssl, evaluate, demo-synthetic.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from . import pipeline
from .config import RunConfig, desk_config, load_config, override
from .errors import ConfigError, ValidationError, VolumeReadError
from .evaluation import write_report
from .train import load_checkpoint

logger = logging.getLogger("ssl_alpnet")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _window(text):
    parts = [int(p) for p in text.lower().replace("x", ",").split(",") if p]
    if len(parts) == 1:
        parts *= 2
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"window must look like 4 or 4x4, got {text!r}")
    return tuple(parts)


def _class_list(text):
    return [c for c in text.split(",") if c]


def _base_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    root = getattr(args, "data_root", None) or cfg.data.root or os.environ.get("ALPNET_DATA_ROOT")
    cfg = override(cfg, "data", root=root, format=getattr(args, "format", None),
                   store_dir=getattr(args, "store_dir", None), target_size=getattr(args, "target_size", None))
    return cfg


def _common_overrides(cfg: RunConfig, args) -> RunConfig:
    cfg = override(cfg, "seed", seed=getattr(args, "seed", None))
    cfg = override(cfg, "alp", mode=getattr(args, "mode", None), alpha=getattr(args, "alpha", None),
                   window_train=getattr(args, "window_train", None), window_infer=getattr(args, "window_infer", None))
    test_group = getattr(args, "test_group", None)
    cfg = override(cfg, "eval", setting=getattr(args, "setting", None), fold=getattr(args, "fold", None),
                   test_group=test_group, classes=getattr(args, "classes", None),
                   chunks=getattr(args, "chunks", None))
    cfg = override(cfg, "train", iterations=getattr(args, "iterations", None), lr0=getattr(args, "lr", None))
    cfg = override(cfg, "superpixel", min_size=getattr(args, "min_size", None), scale=getattr(args, "scale", None))
    if getattr(args, "no_geometric", False):
        cfg = override(cfg, "transforms", enable_geometric=False)
    if getattr(args, "no_intensity", False):
        cfg = override(cfg, "transforms", enable_intensity=False)
    return cfg


def _require_root(cfg: RunConfig):
    if not cfg.data.root:
        raise UsageError("no data root: pass --data-root or set ALPNET_DATA_ROOT")
    if not Path(cfg.data.root).is_dir():
        raise UsageError(f"data root does not exist: {cfg.data.root}")


def cmd_gen_superpixels(args) -> int:
    cfg = _common_overrides(_base_config(args), args)
    _require_root(cfg)
    volumes = pipeline.load_dataset(cfg)
    status = pipeline.gen_superpixels(cfg, volumes, force=args.force)
    failed = {k: v for k, v in status.items() if v.startswith("error")}
    for vid, st in sorted(status.items()):
        print(f"{vid}: {st}")
    built = sum(v == "built" for v in status.values())
    print(f"{built} built, {sum(v == 'skipped' for v in status.values())} skipped, {len(failed)} failed "
          f"-> {pipeline.store_root(cfg)}")
    return EXIT_RUNTIME if failed else EXIT_OK


def cmd_train_ssl(args) -> int:
    cfg = _common_overrides(_base_config(args), args)
    _require_root(cfg)
    volumes = pipeline.load_dataset(cfg)
    try:
        _, log = pipeline.train_ssl(cfg, volumes, args.out, resume=args.resume, force=args.force,
                                    progress=_progress(cfg.train.iterations))
    except FileNotFoundError as exc:
        raise UsageError(f"{exc}") from exc
    print(f"trained {len(log)} iterations; checkpoint in {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model, meta, _ = load_checkpoint(args.checkpoint)
    trained = pipeline.checkpoint_config(meta)
    if args.config:
        cfg = _base_config(args)
        if cfg.training_hash() != meta["run_config_hash"] and not args.force:
            raise UsageError("config does not match the checkpoint's training config (use --force to override)")
    else:
        cfg = override(trained, "data", root=args.data_root or os.environ.get("ALPNET_DATA_ROOT") or trained.data.root)
    cfg = _common_overrides(cfg, args)
    _require_root(cfg)
    volumes = pipeline.load_dataset(cfg)
    vocab = pipeline.class_vocabulary(volumes)
    if vocab != meta.get("class_vocabulary", vocab) and not args.force:
        raise UsageError(f"class vocabulary mismatch: checkpoint {meta['class_vocabulary']} vs data {vocab}")
    classes = cfg.eval.classes
    if classes is None:
        classes = pipeline.make_split(cfg, volumes).test_classes
    missing = [c for c in classes if c not in vocab]
    if missing:
        raise UsageError(f"unknown class(es) {missing}; vocabulary: {sorted(vocab)}")
    if cfg.eval.setting == 2 and not args.force:
        unseen = set(meta.get("split", {}).get("test_classes", []))
        if meta.get("split", {}).get("setting") != 2 or not set(classes) <= unseen:
            raise UsageError("setting 2 needs a checkpoint trained with these classes excluded (use --force)")
    report = pipeline.evaluate(cfg, volumes, model, classes, args.overlays, meta)
    ckpt = Path(args.checkpoint).resolve()
    out = Path(args.out) if args.out else (ckpt if ckpt.is_dir() else ckpt.parent) / "eval_report.json"
    write_report(report, out)
    for cls, v in report["classes"].items():
        print(f"{cls}: mean Dice {v['mean_dice']:.2f}" if v["mean_dice"] is not None else f"{cls}: no pairs")
    print(f"report: {out}")
    return EXIT_OK


def cmd_demo_synthetic(args) -> int:
    cfg = desk_config(seed=args.seed, iterations=args.iterations)
    cfg = _common_overrides(cfg, args)
    report = pipeline.run_demo(cfg, args.out, args.volumes, args.slices, args.size, args.classes_n,
                               progress=_progress(cfg.train.iterations))
    for cls, v in report["classes"].items():
        print(f"held-out {cls}: mean Dice {v['mean_dice']:.2f}")
    print(f"report: {Path(args.out) / 'report.json'}")
    return EXIT_OK


def _progress(total):
    step = max(total // 20, 1)

    def report(rec):
        if rec["iter"] % step == 0 or rec["iter"] == total - 1:
            logger.info("iter %d lr %.6f seg %.4f reg %.4f", rec["iter"], rec["lr"], rec["loss_seg"], rec["loss_reg"])

    return report


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ssl-alpnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def data_args(sp):
        sp.add_argument("--config", help="run configuration JSON")
        sp.add_argument("--data-root", help="volume directory (default: $ALPNET_DATA_ROOT)")
        sp.add_argument("--format", choices=["raw", "nifti"])
        sp.add_argument("--store-dir", help="pseudolabel store root (default: <data-root>/pseudolabels)")
        sp.add_argument("--target-size", type=int)
        sp.add_argument("--force", action="store_true", help="ignore config-hash mismatches / rebuild")

    def split_args(sp):
        sp.add_argument("--setting", type=int, choices=[1, 2])
        sp.add_argument("--fold", type=int)
        sp.add_argument("--test-group", help="group name (upper/lower) or comma-separated classes")
        sp.add_argument("--seed", type=int)

    def model_args(sp):
        sp.add_argument("--mode", choices=["alpnet", "class_prototype_only"])
        sp.add_argument("--alpha", type=float)
        sp.add_argument("--window-train", type=_window)
        sp.add_argument("--window-infer", type=_window)

    sp = sub.add_parser("gen-superpixels", help="build pseudolabel stores for training volumes")
    data_args(sp)
    split_args(sp)
    sp.add_argument("--min-size", type=int)
    sp.add_argument("--scale", type=float)
    sp.set_defaults(func=cmd_gen_superpixels)

    sp = sub.add_parser("train-ssl", help="self-supervised episodic training")
    data_args(sp)
    split_args(sp)
    model_args(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--min-size", type=int)
    sp.add_argument("--no-geometric", action="store_true")
    sp.add_argument("--no-intensity", action="store_true")
    sp.add_argument("--resume", action="store_true")
    sp.set_defaults(func=cmd_train_ssl)

    sp = sub.add_parser("evaluate", help="chunk-protocol evaluation of a checkpoint")
    data_args(sp)
    split_args(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--classes", type=_class_list)
    sp.add_argument("--chunks", type=int)
    sp.add_argument("--window-infer", type=_window)
    sp.add_argument("--out", help="report path (default: next to the checkpoint)")
    sp.add_argument("--overlays", help="directory for per-slice PNG overlays")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("demo-synthetic", help="phantom end-to-end run")
    sp.add_argument("--out", default="demo_out")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--iterations", type=int, default=10_000)
    sp.add_argument("--volumes", type=int, default=20)
    sp.add_argument("--slices", type=int, default=24)
    sp.add_argument("--size", type=int, default=64)
    sp.add_argument("--classes-n", type=int, default=3, help="number of phantom organ classes")
    sp.add_argument("--test-group", help="held-out class(es), default kidney")
    model_args(sp)
    sp.add_argument("--no-geometric", action="store_true")
    sp.add_argument("--no-intensity", action="store_true")
    sp.set_defaults(func=cmd_demo_synthetic)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    if getattr(args, "test_group", None) and "," in args.test_group:
        args.test_group = _class_list(args.test_group)
    if getattr(args, "command", None) == "demo-synthetic" and args.test_group:
        tg = args.test_group if isinstance(args.test_group, list) else [args.test_group]
        args.classes = tg
        args.test_group = tg
    try:
        return args.func(args)
    except (UsageError, ConfigError, ValidationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (VolumeReadError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, VolumeReadError) and "does not exist" in str(exc) else EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - top-level guard
        logger.exception("failed: %s", exc)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
