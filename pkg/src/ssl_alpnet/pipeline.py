"""Stage orchestration shared by the CLI and the synthetic demo."""

from __future__ import annotations

import json
import logging
from pathlib import Path

from .config import RunConfig
from .data import discover_volumes, make_phantom_dataset, partition, save_volume
from .errors import ConfigError
from .evaluation import run_evaluation, write_report
from .store import ensure_store, read_manifest, read_store
from .train import load_checkpoint, train

logger = logging.getLogger(__name__)


def store_root(cfg: RunConfig) -> Path:
    if cfg.data.store_dir:
        return Path(cfg.data.store_dir)
    if not cfg.data.root:
        raise ConfigError("data.root (or --data-root) is required")
    return Path(cfg.data.root) / "pseudolabels"


def load_dataset(cfg: RunConfig):
    if not cfg.data.root:
        raise ConfigError("data.root (or --data-root) is required")
    return discover_volumes(cfg.data.root, cfg.data.format, cfg.data.target_size)


def make_split(cfg: RunConfig, volumes):
    e = cfg.eval
    return partition(volumes, e.fold, e.setting, e.test_group, e.n_folds, e.groups)


def gen_superpixels(cfg: RunConfig, volumes, force: bool = False) -> dict:
    """Build stores for every training volume; returns {volume_id: 'built'|'skipped'|error}."""
    split = make_split(cfg, volumes)
    root = store_root(cfg)
    status = {}
    for v in volumes:
        if v.id not in split.train_ids:
            continue
        try:
            _, rebuilt = ensure_store(v, cfg.superpixel, root, force)
            status[v.id] = "built" if rebuilt else "skipped"
        except Exception as exc:  # keep going; caller reports failures
            logger.error("superpixels failed for %s: %s", v.id, exc)
            status[v.id] = f"error: {exc}"
    return status


def load_stores(cfg: RunConfig, volumes, ids, force: bool = False) -> dict:
    root = store_root(cfg)
    out = {}
    for vid in ids:
        manifest = read_manifest(root, vid)
        if manifest is None:
            raise FileNotFoundError(f"missing pseudolabel store for {vid!r} under {root}; run gen-superpixels first")
        if manifest["config"] != cfg.superpixel.to_dict() and not force:
            raise ConfigError(
                f"store for {vid!r} was built with a different superpixel config; rerun gen-superpixels or pass --force"
            )
        out[vid] = read_store(root, vid)
    return out


def class_vocabulary(volumes) -> dict:
    vocab = {}
    for v in volumes:
        vocab.update(v.class_ids)
    return dict(sorted(vocab.items()))


def train_ssl(cfg: RunConfig, volumes, out_dir, resume: bool = False, force: bool = False,
              stop_at: int | None = None, progress=None):
    split = make_split(cfg, volumes)
    train_vols = [v for v in volumes if v.id in split.train_ids]
    stores = load_stores(cfg, volumes, split.train_ids, force)
    extra = {
        "run_config": cfg.to_dict(),
        "run_config_hash": cfg.training_hash(),
        "class_vocabulary": class_vocabulary(volumes),
        "split": {"fold": split.fold, "setting": split.setting, "test_classes": split.test_classes,
                  "train_ids": split.train_ids, "test_ids": split.test_ids,
                  "n_excluded_slices": len(split.excluded)},
    }
    return train(train_vols, stores, cfg.transforms, cfg.alp, cfg.loss, cfg.train, cfg.encoder,
                 split.excluded, out_dir, resume, extra, stop_at, progress)


def evaluate(cfg: RunConfig, volumes, model, classes=None, overlay_dir=None, meta: dict | None = None) -> dict:
    split = make_split(cfg, volumes)
    classes = list(classes or cfg.eval.classes or split.test_classes)
    unknown = [c for c in classes if c not in class_vocabulary(volumes)]
    if unknown:
        raise ConfigError(f"class(es) {unknown} not in dataset vocabulary {sorted(class_vocabulary(volumes))}")
    report = run_evaluation(model, volumes, split, classes, cfg.eval.chunks, cfg.seed,
                            config=cfg.to_dict(), overlay_dir=overlay_dir)
    if meta is not None:
        report["checkpoint_config_hash"] = meta.get("run_config_hash")
        report["checkpoint_iteration"] = meta.get("iteration")
    return report


def checkpoint_config(meta: dict) -> RunConfig:
    from .config import config_from_dict

    return config_from_dict(meta["run_config"])


def write_phantoms(cfg: RunConfig, data_dir, n_volumes=20, n_slices=24, size=64, n_classes=3):
    vols = make_phantom_dataset(n_volumes, n_slices, size, n_classes, rng=cfg.seed)
    for v in vols:
        save_volume(v, Path(data_dir) / v.id)
    return vols


def run_demo(cfg: RunConfig, out_dir, n_volumes=20, n_slices=24, size=64, n_classes=3, progress=None) -> dict:
    """Phantoms -> pseudolabels -> SSL training -> held-out evaluation, all under ``out_dir``."""
    import dataclasses

    out = Path(out_dir)
    data_dir = out / "data"
    cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, root=str(data_dir), target_size=size))
    write_phantoms(cfg, data_dir, n_volumes, n_slices, size, n_classes)
    volumes = load_dataset(cfg)
    gen_superpixels(cfg, volumes)
    model, log = train_ssl(cfg, volumes, out / "run", progress=progress)
    _, meta, _ = load_checkpoint(out / "run")
    report = evaluate(cfg, volumes, model, meta=meta)
    write_report(report, out / "report.json")
    (out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1) + "\n")
    return report
