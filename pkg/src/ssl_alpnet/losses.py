"""Weighted segmentation cross entropy, prototypical alignment, and their sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import torch

from .errors import DivergenceError, ShapeMismatchError, ValidationError
from .model import DegenerateSupport, NoForeground, build_ensemble, predict

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    bg_weight: float = 0.05
    fg_weight: float = 1.0
    lambda_reg: float = 1.0

    def __post_init__(self):
        if self.bg_weight < 0 or self.fg_weight < 0:
            raise ValidationError("class weights must be >= 0")
        if self.lambda_reg < 0:
            raise ValidationError("lambda_reg must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


def seg_loss(probs, target_fg, cfg: LossConfig | None = None) -> torch.Tensor:
    """Class-weighted cross entropy averaged over pixels (and batch).

    probs: (..., 2, H, W) with channel 0 background; target_fg: (..., H, W).
    """
    cfg = cfg or LossConfig()
    target = torch.as_tensor(target_fg).to(probs.dtype)
    if probs.shape[-3] != 2 or probs.shape[-2:] != target.shape[-2:]:
        raise ShapeMismatchError(f"prediction {tuple(probs.shape)} does not match target {tuple(target.shape)}")
    logp = probs.clamp_min(LOG_FLOOR).log()
    per_pixel = cfg.fg_weight * target * logp[..., 1, :, :] + cfg.bg_weight * (1 - target) * logp[..., 0, :, :]
    return -per_pixel.mean()


def alignment_loss(model, support_feats, support_fg, query_feats, query_probs,
                   cfg: LossConfig | None = None, window=None) -> torch.Tensor:
    """Reverse task: the query and its hard prediction segment the support.

    Returns a zero tensor when the predicted mask has no foreground (or no
    background), which happens early in training.
    """
    cfg = cfg or LossConfig()
    window = window or model.cfg.window_train
    rev_masks = query_probs.argmax(dim=-3) == 1  # (Q, H, W)
    zero = query_probs.sum() * 0.0
    if not rev_masks.any():
        return zero
    total = zero
    out_size = support_fg.shape[-2:]
    for s in range(support_feats.shape[0]):
        try:
            ens = build_ensemble(list(query_feats), list(rev_masks), model.cfg, window)
        except (NoForeground, DegenerateSupport):
            return zero
        back = predict(ens, support_feats[s], out_size, model.cfg.alpha)
        total = total + seg_loss(back, support_fg[s], cfg)
    return total / support_feats.shape[0]


def total_loss(seg, reg, cfg: LossConfig | None = None):
    cfg = cfg or LossConfig()
    for name, v in (("seg", seg), ("reg", reg)):
        if not torch.isfinite(torch.as_tensor(v)).all():
            raise DivergenceError(f"non-finite {name} loss: {v}")
    return seg + cfg.lambda_reg * reg
