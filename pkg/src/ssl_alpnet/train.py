"""Episodic SSL training loop with stepped learning-rate decay."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from .episode import EpisodeSampler
from .errors import DivergenceError, ValidationError
from .losses import LossConfig, alignment_loss, seg_loss, total_loss
from .model import ALPNet, AlpConfig, Encoder

logger = logging.getLogger(__name__)

CHECKPOINT = "checkpoint.pt"
CHECKPOINT_META = "checkpoint.json"
TRAIN_LOG = "train_log.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 10_000
    lr0: float = 1e-3
    decay: float = 0.98
    decay_every: int = 1000
    batch_size: int = 1
    seed: int = 0
    momentum: float = 0.9
    weight_decay: float = 0.0
    checkpoint_every: int = 0  # 0: only at the end
    dtype: str = "float32"

    def __post_init__(self):
        if self.iterations < 1:
            raise ValidationError("iterations must be >= 1")
        if not self.lr0 > 0:
            raise ValidationError("lr0 must be > 0")
        if not 0 < self.decay <= 1:
            raise ValidationError("decay must lie in (0, 1]")
        if self.decay_every < 1 or self.batch_size < 1:
            raise ValidationError("decay_every and batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError("dtype must be float32 or float64")

    def to_dict(self) -> dict:
        return asdict(self)


def learning_rate(t: int, cfg: TrainConfig) -> float:
    return cfg.lr0 * cfg.decay ** (t // cfg.decay_every)


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def episode_tensors(ep, dtype=torch.float32):
    s_img = torch.from_numpy(np.stack([s[0] for s in ep.support])).to(dtype)
    s_fg = torch.from_numpy(np.stack([s[1] for s in ep.support]))
    q_img = torch.from_numpy(np.stack([q[0] for q in ep.query])).to(dtype)
    q_fg = torch.from_numpy(np.stack([q[1] for q in ep.query]))
    return s_img, s_fg, q_img, q_fg


def episode_loss(model: ALPNet, ep, loss_cfg: LossConfig, dtype=torch.float32):
    """(seg, reg) losses of one SSL episode at the training window."""
    s_img, s_fg, q_img, q_fg = episode_tensors(ep, dtype)
    window = model.cfg.window_train
    probs, s_feats, q_feats = model(s_img, s_fg, q_img, window)
    seg = seg_loss(probs, q_fg, loss_cfg)
    if loss_cfg.lambda_reg > 0:
        reg = alignment_loss(model, s_feats, s_fg, q_feats, probs, loss_cfg, window)
    else:
        reg = seg * 0.0
    return seg, reg


def build_model(encoder_spec: dict, alp_cfg: AlpConfig, seed: int, dtype="float32") -> ALPNet:
    torch.manual_seed(seed)
    model = ALPNet(Encoder.from_spec(encoder_spec), alp_cfg)
    return model.to(getattr(torch, dtype))


def save_checkpoint(out_dir, model, optimizer, iteration, rng, meta: dict):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(
        {"model": model.state_dict(), "optimizer": optimizer.state_dict(), "iteration": iteration},
        out / CHECKPOINT,
    )
    meta = dict(meta, iteration=iteration, rng_state=rng.bit_generator.state)
    (out / CHECKPOINT_META).write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")


def load_checkpoint(path):
    """Return (model, meta, raw state) from a checkpoint file or directory."""
    p = Path(path)
    ckpt = p / CHECKPOINT if p.is_dir() else p
    meta_p = ckpt.with_name(CHECKPOINT_META)
    if not ckpt.exists() or not meta_p.exists():
        raise FileNotFoundError(f"no checkpoint at {path}")
    meta = json.loads(meta_p.read_text())
    state = torch.load(ckpt, map_location="cpu", weights_only=True)
    model = ALPNet(Encoder.from_spec(meta["encoder"]), AlpConfig(**meta["alp"]))
    model = model.to(getattr(torch, meta["train"].get("dtype", "float32")))
    model.load_state_dict(state["model"])
    model.eval()
    return model, meta, state


def train(volumes, pseudolabels: dict, transform_cfg, alp_cfg: AlpConfig, loss_cfg: LossConfig,
          train_cfg: TrainConfig, encoder_spec: dict, excluded=(), out_dir=None, resume=False,
          meta_extra: dict | None = None, stop_at: int | None = None, progress=None):
    """Run SSL training; returns (model, log records).

    ``stop_at`` ends the run early (used to simulate interruption); the
    learning-rate schedule still follows ``train_cfg.iterations``.
    """
    dtype = getattr(torch, train_cfg.dtype)
    model = build_model(encoder_spec, alp_cfg, train_cfg.seed, train_cfg.dtype)
    opt = torch.optim.SGD(model.parameters(), lr=train_cfg.lr0, momentum=train_cfg.momentum,
                          weight_decay=train_cfg.weight_decay)
    rng = np.random.default_rng(train_cfg.seed)
    sampler = EpisodeSampler(volumes, pseudolabels, transform_cfg, excluded)

    meta = {
        "encoder": encoder_spec,
        "alp": alp_cfg.to_dict(),
        "loss": loss_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "transforms": transform_cfg.to_dict(),
    }
    meta["config_hash"] = config_hash(meta)
    meta.update(meta_extra or {})

    start, log = 0, []
    log_path = Path(out_dir) / TRAIN_LOG if out_dir is not None else None
    if resume and out_dir is not None and (Path(out_dir) / CHECKPOINT).exists():
        prev_meta = json.loads((Path(out_dir) / CHECKPOINT_META).read_text())
        if prev_meta["config_hash"] != meta["config_hash"]:
            raise ValidationError("cannot resume: checkpoint was produced by a different configuration")
        state = torch.load(Path(out_dir) / CHECKPOINT, map_location="cpu", weights_only=True)
        model.load_state_dict(state["model"])
        opt.load_state_dict(state["optimizer"])
        rng.bit_generator.state = prev_meta["rng_state"]
        start = state["iteration"]
        if log_path.exists():
            log = [json.loads(line) for line in log_path.read_text().splitlines()][:start]
        logger.info("resumed from iteration %d", start)

    if log_path is not None:
        log_path.parent.mkdir(parents=True, exist_ok=True)
        log_path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in log))
        log_fh = log_path.open("a")
    end = train_cfg.iterations if stop_at is None else min(stop_at, train_cfg.iterations)

    model.train()
    try:
        for t in range(start, end):
            lr = learning_rate(t, train_cfg)
            for g in opt.param_groups:
                g["lr"] = lr
            opt.zero_grad()
            segs, regs, loss = [], [], 0.0
            for _ in range(train_cfg.batch_size):
                ep = sampler.sample(rng)
                seg, reg = episode_loss(model, ep, loss_cfg, dtype)
                try:
                    loss = loss + total_loss(seg, reg, loss_cfg) / train_cfg.batch_size
                except DivergenceError:
                    _dump_divergence(out_dir, t, ep, seg, reg)
                    raise
                segs.append(seg.item())
                regs.append(reg.item())
            loss.backward()
            opt.step()
            rec = {
                "iter": t,
                "lr": lr,
                "loss_seg": float(np.mean(segs)),
                "loss_reg": float(np.mean(regs)),
                "loss_total": loss.item(),
                "episode_provenance": ep.provenance,
            }
            log.append(rec)
            if log_path is not None:
                log_fh.write(json.dumps(rec, sort_keys=True) + "\n")
            if progress is not None:
                progress(rec)
            done = t + 1
            if out_dir is not None and train_cfg.checkpoint_every and done % train_cfg.checkpoint_every == 0:
                log_fh.flush()
                save_checkpoint(out_dir, model, opt, done, rng, meta)
    finally:
        if log_path is not None:
            log_fh.close()
    if out_dir is not None:
        save_checkpoint(out_dir, model, opt, end, rng, meta)
    model.eval()
    return model, log


def _dump_divergence(out_dir, t, ep, seg, reg):
    seg, reg = float(torch.as_tensor(seg).detach()), float(torch.as_tensor(reg).detach())
    msg = f"non-finite loss at iteration {t}: seg={seg} reg={reg} source={ep.source}"
    logger.error(msg)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "divergence.json").write_text(json.dumps(
            {"iteration": t, "loss_seg": seg, "loss_reg": reg, "source": list(ep.source or ()),
             "superpixel_index": ep.superpixel_index}, indent=1))
