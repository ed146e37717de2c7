"""On-disk pseudolabel store: one directory per volume, RLE masks in JSON.

Layout::

    <root>/<volume_id>/manifest.json     config, content hash, flagged slices
    <root>/<volume_id>/slice_0000.json   [{slice_index, mask_id, rle, area}, ...]

RLE is row-major run lengths, alternating background/foreground and starting
with a (possibly zero) background run: ``{"size": [H, W], "counts": [...]}``.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .superpixel import PseudolabelSet, SuperpixelConfig, build_pseudolabel_set

MANIFEST = "manifest.json"


def rle_encode(mask: np.ndarray) -> dict:
    flat = np.asarray(mask, dtype=bool).ravel()
    padded = np.concatenate([[False], flat, [False]])
    change = np.flatnonzero(padded[1:] != padded[:-1])
    # change holds alternating run starts/ends of the foreground
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds)
    if counts.size and counts[-1] == 0:
        counts = counts[:-1]
    return {"size": [int(s) for s in mask.shape], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise ValidationError(f"RLE counts sum to {counts.sum()}, expected {h * w}")
    values = np.arange(counts.size) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)


def content_hash(intensities: np.ndarray, config: SuperpixelConfig) -> str:
    arr = np.ascontiguousarray(intensities, dtype="<f4")
    h = hashlib.sha256()
    h.update(json.dumps(list(arr.shape)).encode())
    h.update(arr.tobytes())
    h.update(json.dumps(config.to_dict(), sort_keys=True).encode())
    return h.hexdigest()


def _dump(obj, path: Path):
    path.write_text(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def write_store(pl: PseudolabelSet, root, chash: str) -> Path:
    out = Path(root) / pl.volume_id
    out.mkdir(parents=True, exist_ok=True)
    for s in range(len(pl)):
        records = [
            {"slice_index": s, "mask_id": i, "rle": rle_encode(m), "area": int(m.sum())}
            for i, m in enumerate(pl.masks(s))
        ]
        _dump(records, out / f"slice_{s:04d}.json")
    # manifest last: its presence marks a complete store
    _dump(
        {
            "volume_id": pl.volume_id,
            "config": pl.config.to_dict(),
            "content_hash": chash,
            "n_slices": len(pl),
            "shape": [int(x) for x in pl.label_maps.shape],
            "flagged": [int(i) for i in pl.flagged],
        },
        out / MANIFEST,
    )
    return out


def read_manifest(root, volume_id: str) -> dict | None:
    path = Path(root) / volume_id / MANIFEST
    if not path.exists():
        return None
    return json.loads(path.read_text())


def read_store(root, volume_id: str) -> PseudolabelSet:
    manifest = read_manifest(root, volume_id)
    if manifest is None:
        raise FileNotFoundError(f"no pseudolabel store for volume {volume_id!r} under {root}")
    base = Path(root) / volume_id
    n, h, w = manifest["shape"]
    maps = np.zeros((n, h, w), dtype=np.int32)
    for s in range(n):
        for rec in json.loads((base / f"slice_{s:04d}.json").read_text()):
            maps[s][rle_decode(rec["rle"])] = rec["mask_id"]
    return PseudolabelSet(volume_id, SuperpixelConfig(**manifest["config"]), maps, list(manifest["flagged"]))


def ensure_store(volume, config: SuperpixelConfig, root, force: bool = False) -> tuple[PseudolabelSet, bool]:
    """Build (or reuse) the store for ``volume``; returns (set, was_rebuilt)."""
    chash = content_hash(volume.intensities, config)
    manifest = read_manifest(root, volume.id)
    if not force and manifest is not None and manifest["content_hash"] == chash:
        return read_store(root, volume.id), False
    pl = build_pseudolabel_set(volume, config)
    write_store(pl, root, chash)
    return pl, True
