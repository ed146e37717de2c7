"""Shared fixtures-as-functions for unit and acceptance tests."""

import numpy as np
import torch

from oracles import central_difference
from ssl_alpnet.losses import LossConfig, alignment_loss, seg_loss
from ssl_alpnet.model import ALPNet, AlpConfig, Encoder

GRAD_ENCODER = {"channels": [4, 4], "strides": [2, 1], "norm": "group"}
# gradients below this are compared absolutely; the first conv bias feeds GroupNorm
# and has an identically zero gradient, which FD only reproduces up to roundoff
REL_FLOOR = 1e-6
FD_EPS = 1e-5


def _toy_episode(seed):
    g = np.random.default_rng(seed)
    img = np.clip(0.3 + 0.1 * g.standard_normal((8, 8)), 0, 1)
    mask = np.zeros((8, 8), dtype=bool)
    r, c = g.integers(0, 4, size=2)
    mask[r:r + 4, c:c + 4] = True
    img[mask] += 0.4
    q = np.roll(img, 1, axis=1)
    q_mask = np.roll(mask, 1, axis=1)
    as_t = lambda a: torch.from_numpy(np.repeat(np.clip(a, 0, 1)[None, None], 3, axis=1))
    return as_t(img), torch.from_numpy(mask[None]), as_t(q), torch.from_numpy(q_mask[None])


def gradcheck_instance(max_seed=200):
    """Find a float64 toy episode whose loss is smooth around the current
    parameters (non-trivial reverse mask, no argmax ties), then compare the
    autograd gradient of seg + 1.0 * reg with central differences.

    Returns (max_rel_err, info dict).
    """
    loss_cfg = LossConfig(lambda_reg=1.0)
    cfg = AlpConfig(window_train=(2, 2))
    for seed in range(max_seed):
        torch.manual_seed(seed)
        model = ALPNet(Encoder.from_spec(GRAD_ENCODER), cfg).to(torch.float64)
        s_img, s_fg, q_img, q_fg = _toy_episode(seed)

        def loss_fn():
            probs, sf, qf = model(s_img, s_fg, q_img, cfg.window_train)
            seg = seg_loss(probs, q_fg, loss_cfg)
            reg = alignment_loss(model, sf, s_fg, qf, probs, loss_cfg, cfg.window_train)
            return seg + loss_cfg.lambda_reg * reg, seg, reg, probs

        total, seg, reg, probs = loss_fn()
        rev = probs.argmax(dim=1) == 1
        margin = (probs[:, 1] - 0.5).abs().min().item()
        if reg.item() == 0.0 or not rev.any() or rev.all() or margin < 1e-3:
            continue
        params = list(model.parameters())
        analytic = torch.autograd.grad(total, params)
        numeric = central_difference(lambda: loss_fn()[0], params, eps=FD_EPS)
        errs = []
        for a, n in zip(analytic, numeric):
            denom = torch.maximum(torch.maximum(a.abs(), n.abs()), torch.full_like(a, REL_FLOOR))
            errs.append(((a - n).abs() / denom).max().item())
        info = {"seed": seed, "seg": seg.item(), "reg": reg.item(), "margin": margin,
                "n_params": sum(p.numel() for p in params)}
        return max(errs), info
    raise RuntimeError("no smooth toy instance found")
