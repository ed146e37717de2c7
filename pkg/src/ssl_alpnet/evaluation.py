"""Chunk-based volumetric few-shot evaluation and Dice reporting."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from scipy import ndimage

from .episode import compose_inference_episode
from .errors import ShapeMismatchError, ValidationError
from .model import encode


def dice(pred, gt) -> float:
    """Dice overlap scaled to [0, 100]; two empty masks score 100."""
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeMismatchError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 100.0
    return 100.0 * 2.0 * int(np.logical_and(pred, gt).sum()) / denom


def split_extent(top: int, bottom: int, c: int) -> list[tuple[int, int]]:
    """Split [top, bottom] into c contiguous ranges; earlier chunks take the remainder."""
    length = bottom - top + 1
    if c < 1 or c > length:
        raise ValidationError(f"cannot split an extent of {length} slices into {c} chunks")
    base, rem = divmod(length, c)
    out, start = [], top
    for i in range(c):
        n = base + (1 if i < rem else 0)
        out.append((start, start + n - 1))
        start += n
    return out


@dataclass
class ChunkAssignment:
    class_id: str
    support_id: str
    query_id: str
    n_chunks: int
    support_slices: list  # one per chunk
    query_ranges: list  # inclusive (start, end) per chunk


def assign_chunks(support_vol, query_vol, class_id, c: int = 3, allow_same_volume=False) -> ChunkAssignment:
    if support_vol.id == query_vol.id and not allow_same_volume:
        raise ValidationError("support and query volumes must differ")
    s_ext = support_vol.class_extent(class_id)
    q_ext = query_vol.class_extent(class_id)
    if s_ext is None or q_ext is None:
        missing = support_vol.id if s_ext is None else query_vol.id
        raise ValidationError(f"class {class_id!r} absent from volume {missing!r}")
    s_chunks = split_extent(*s_ext, c)
    q_chunks = split_extent(*q_ext, c)
    return ChunkAssignment(
        class_id, support_vol.id, query_vol.id, c,
        [(a + b) // 2 for a, b in s_chunks],
        q_chunks,
    )


def _plane3(vol, s):
    return np.repeat(vol.intensities[s][None], 3, axis=0)


@torch.no_grad()
def predict_chunks(model, support_vol, query_vol, assignment: ChunkAssignment, window=None) -> np.ndarray:
    """Binary predictions for every query slice in the assignment's ranges.

    Only query intensities are read here; query labels never reach the model.
    """
    model.eval()
    window = window or model.cfg.window_infer
    dtype = next(model.parameters()).dtype if any(True for _ in model.parameters()) else torch.float32
    pred = np.zeros(query_vol.intensities.shape, dtype=bool)
    for s_idx, (q0, q1) in zip(assignment.support_slices, assignment.query_ranges):
        ep = compose_inference_episode(
            [(support_vol.intensities[s_idx], support_vol.labels[assignment.class_id][s_idx])],
            [query_vol.intensities[q] for q in range(q0, q1 + 1)],
            assignment.class_id,
            support_vol.id,
            query_vol.id,
            allow_same_volume=support_vol.id == query_vol.id,
        )
        s_img = torch.from_numpy(np.stack([s[0] for s in ep.support])).to(dtype)
        s_fg = torch.from_numpy(np.stack([s[1] for s in ep.support]))
        q_img = torch.from_numpy(np.stack([q[0] for q in ep.query])).to(dtype)
        s_feat = encode(model.encoder, s_img)
        q_feat = encode(model.encoder, q_img)
        probs = model.segment(s_feat, s_fg, q_feat, q_img.shape[-2:], window)
        pred[q0:q1 + 1] = (probs.argmax(dim=1) == 1).cpu().numpy()
    return pred


def evaluate_class(model, support_vol, query_vol, class_id, c: int = 3, window=None,
                   allow_same_volume=False, return_prediction=False):
    """3D Dice over the query class extent."""
    asg = assign_chunks(support_vol, query_vol, class_id, c, allow_same_volume)
    pred = predict_chunks(model, support_vol, query_vol, asg, window)
    q0, q1 = asg.query_ranges[0][0], asg.query_ranges[-1][1]
    score = dice(pred[q0:q1 + 1], query_vol.labels[class_id][q0:q1 + 1])
    if return_prediction:
        return score, pred, asg
    return score


def run_evaluation(model, volumes, split, classes, c: int = 3, seed: int = 0, config: dict | None = None,
                   overlay_dir=None, window=None) -> dict:
    """EvalReport over all ordered (support, query) pairs of the test fold."""
    by_id = {v.id: v for v in volumes}
    test = [by_id[i] for i in split.test_ids]
    pairs, per_class = [], {}
    for cls in classes:
        present = [v for v in test if v.class_extent(cls) is not None]
        per_query = {}
        for q in present:
            scores = []
            for s in present:
                if s.id == q.id:
                    continue
                score, pred, asg = evaluate_class(model, s, q, cls, c, window, return_prediction=True)
                scores.append(score)
                pairs.append({"class": cls, "support": s.id, "query": q.id, "dice": score})
                if overlay_dir is not None:
                    write_overlays(overlay_dir, q, pred, asg)
            if scores:
                per_query[q.id] = float(np.mean(scores))
        per_class[cls] = {
            "mean_dice": float(np.mean(list(per_query.values()))) if per_query else None,
            "per_query": per_query,
        }
    means = [v["mean_dice"] for v in per_class.values() if v["mean_dice"] is not None]
    return {
        "fold": split.fold,
        "setting": split.setting,
        "test_ids": list(split.test_ids),
        "classes": per_class,
        "global_mean": float(np.mean(means)) if means else None,
        "pairs": pairs,
        "chunks": c,
        "seed": seed,
        "config": config or {},
        "conventions": {
            "dice_scale": "0-100",
            "both_empty_dice": 100.0,
            "aggregation": "mean over supports per query volume, then mean over query volumes",
            "query_extent_from_ground_truth": True,
            "pairing": "all ordered pairs of distinct test volumes",
        },
    }


def aggregate_reports(reports: list[dict]) -> dict:
    """Combine per-fold reports into per-class means across folds."""
    folds = {}
    for r in reports:
        folds[str(r["fold"])] = {k: v["mean_dice"] for k, v in r["classes"].items()}
    classes = sorted({k for f in folds.values() for k in f})
    per_class = {}
    for k in classes:
        vals = [f[k] for f in folds.values() if f.get(k) is not None]
        per_class[k] = float(np.mean(vals)) if vals else None
    vals = [v for v in per_class.values() if v is not None]
    return {"folds": folds, "classes": per_class, "global_mean": float(np.mean(vals)) if vals else None}


def write_report(report: dict, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(report, sort_keys=True, indent=1) + "\n")
    return path


def write_overlays(out_dir, query_vol, pred, asg: ChunkAssignment):
    """One PNG per evaluated query slice: grayscale slice with red predicted contour."""
    out = Path(out_dir) / asg.class_id / f"{asg.support_id}__{asg.query_id}"
    out.mkdir(parents=True, exist_ok=True)
    for q0, q1 in asg.query_ranges:
        for s in range(q0, q1 + 1):
            gray = (np.clip(query_vol.intensities[s], 0, 1) * 255).astype(np.uint8)
            rgb = np.repeat(gray[..., None], 3, axis=2)
            m = pred[s]
            edge = m & ~ndimage.binary_erosion(m)
            rgb[edge] = (255, 0, 0)
            Image.fromarray(rgb).save(out / f"slice_{s:04d}.png")
