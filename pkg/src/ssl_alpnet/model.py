"""ALPNet forward pass: encoder, adaptive local prototype pooling, similarity classifier.

Tensors follow torch layout: features are (D, H', W') per image, masks are
(H, W) at input resolution or (H', W') once pooled to the feature grid.
Class index 0 is background, 1 the foreground class of a 1-way episode.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ShapeMismatchError, ValidationError

MODES = ("alpnet", "class_prototype_only")


class NoForeground(ValidationError):
    """A support mask has no foreground at feature resolution."""


class DegenerateSupport(ValidationError):
    """A support cannot provide prototypes for both background and foreground."""


@dataclass(frozen=True)
class AlpConfig:
    window_train: tuple = (4, 4)
    window_infer: tuple = (2, 2)
    threshold: float = 0.95
    alpha: float = 20.0
    mode: str = "alpnet"

    def __post_init__(self):
        for name in ("window_train", "window_infer"):
            win = tuple(int(v) for v in getattr(self, name))
            if len(win) != 2 or min(win) < 1:
                raise ValidationError(f"{name} must be two positive integers, got {win}")
            object.__setattr__(self, name, win)
        if not 0 < self.threshold <= 1:
            raise ValidationError(f"threshold must lie in (0, 1], got {self.threshold}")
        if not self.alpha > 0:
            raise ValidationError(f"alpha must be > 0, got {self.alpha}")
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}, got {self.mode!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["window_train"], d["window_infer"] = list(self.window_train), list(self.window_infer)
        return d


# ---------------------------------------------------------------- encoder

DESK_ENCODER = {"channels": [32, 64, 64, 64], "strides": [1, 2, 2, 1], "norm": "group"}
PAPER_SCALE_ENCODER = {"channels": [64, 128, 256, 256], "strides": [2, 2, 2, 1], "norm": "group"}


class Encoder(nn.Module):
    """Plain conv stack: 3x3 conv per stage, GroupNorm + ReLU between stages.

    The last stage is linear so features can take either sign under the
    cosine classifier.
    """

    def __init__(self, channels=(32, 64, 64, 64), strides=(1, 2, 2, 1), norm="group", in_channels=3):
        super().__init__()
        if len(channels) != len(strides):
            raise ValidationError("channels and strides must have equal length")
        self.spec = {"channels": list(channels), "strides": list(strides), "norm": norm, "in_channels": in_channels}
        layers = []
        c_in = in_channels
        for i, (c, s) in enumerate(zip(channels, strides)):
            layers.append(nn.Conv2d(c_in, c, 3, stride=s, padding=1))
            if i < len(channels) - 1:
                if norm == "group":
                    layers.append(nn.GroupNorm(min(8, c), c))
                layers.append(nn.ReLU(inplace=False))
            c_in = c
        self.body = nn.Sequential(*layers)
        self.stride = math.prod(strides)
        self.depth = channels[-1]

    @classmethod
    def from_spec(cls, spec: dict) -> "Encoder":
        return cls(spec["channels"], spec["strides"], spec.get("norm", "group"), spec.get("in_channels", 3))

    def forward(self, x):
        return self.body(x * 2.0 - 1.0)


def encode(enc: nn.Module, image) -> torch.Tensor:
    """Features for (3, H, W) or (B, 3, H, W) input."""
    x = torch.as_tensor(image)
    single = x.dim() == 3
    if single:
        x = x[None]
    if x.dim() != 4 or x.shape[1] != getattr(enc, "spec", {}).get("in_channels", x.shape[1]):
        raise ShapeMismatchError(f"encoder expects (B, C, H, W) input, got {tuple(x.shape)}")
    stride = getattr(enc, "stride", 1)
    if x.shape[-1] % stride or x.shape[-2] % stride:
        raise ShapeMismatchError(f"input size {tuple(x.shape[-2:])} not divisible by encoder stride {stride}")
    p = next(enc.parameters(), None)
    if p is not None:
        x = x.to(p.dtype)
    f = enc(x)
    return f[0] if single else f


# ---------------------------------------------------------------- prototypes


@dataclass
class Prototype:
    vector: torch.Tensor
    class_id: int  # 0 background, 1 foreground
    kind: str  # "local" or "class_level"
    window: tuple | None = None  # (m, n) grid position for local prototypes


@dataclass
class PrototypeEnsemble:
    prototypes: list = field(default_factory=list)

    def vectors(self, class_id: int) -> torch.Tensor:
        vs = [p.vector for p in self.prototypes if p.class_id == class_id]
        if not vs:
            raise DegenerateSupport(f"ensemble has no prototype for class {class_id}")
        return torch.stack(vs)

    def count(self, class_id: int | None = None, kind: str | None = None) -> int:
        return sum(
            1 for p in self.prototypes
            if (class_id is None or p.class_id == class_id) and (kind is None or p.kind == kind)
        )


def pool_mask(mask, feat_hw) -> torch.Tensor:
    """Average-pool an input-resolution mask onto the feature grid."""
    m = torch.as_tensor(mask)
    if not m.is_floating_point():
        m = m.float()
    h, w = m.shape[-2:]
    fh, fw = feat_hw
    if (h, w) == (fh, fw):
        return m
    if h % fh or w % fw or h // fh != w // fw:
        raise ShapeMismatchError(f"mask {tuple(m.shape)} is not an integer multiple of feature grid {feat_hw}")
    return F.avg_pool2d(m[None, None], h // fh)[0, 0]


def local_prototypes(feat, fg_mask, window, threshold: float = 0.95) -> list[Prototype]:
    """Windowed average pooling of features; class by thresholded pooled mask.

    Features and the feature-grid mask are zero-padded on the right/bottom to
    a multiple of the window, so padded windows lean towards background.
    """
    lh, lw = window
    d, fh, fw = feat.shape
    m = pool_mask(fg_mask, (fh, fw)).to(feat.dtype)
    ph, pw = (-fh) % lh, (-fw) % lw
    pooled = F.avg_pool2d(F.pad(feat, (0, pw, 0, ph))[None], (lh, lw))[0]
    ya = F.avg_pool2d(F.pad(m, (0, pw, 0, ph))[None, None], (lh, lw))[0, 0]
    fg = (ya >= threshold).tolist()
    return [
        Prototype(pooled[:, i, j], int(fg[i][j]), "local", (i, j))
        for i in range(pooled.shape[1])
        for j in range(pooled.shape[2])
    ]


def class_prototype(feat, fg_mask) -> Prototype:
    """Masked average pooling under the (binarized) feature-grid mask.

    A mask that survives pooling only as a fraction of one cell falls back to
    its soft pooled weights, so small objects still get a prototype.
    """
    d, fh, fw = feat.shape
    soft = pool_mask(fg_mask, (fh, fw)).to(feat.dtype)
    weights = (soft >= 0.5).to(feat.dtype)
    if weights.sum() == 0:
        weights = soft
    total = weights.sum()
    if total <= 0:
        raise NoForeground("mask is empty at feature resolution")
    vec = (feat * weights).sum(dim=(1, 2)) / total
    return Prototype(vec, 1, "class_level", None)


def build_ensemble(feats, fg_masks, cfg: AlpConfig, window=None) -> PrototypeEnsemble:
    """Assemble the prototype ensemble over K support shots."""
    if len(feats) == 0:
        raise ValidationError("at least one support shot is required")
    window = tuple(window or cfg.window_infer)
    protos = []
    fg_level = []
    for feat, mask in zip(feats, fg_masks):
        try:
            fg_level.append(class_prototype(feat, mask))
        except NoForeground:
            continue
    if not fg_level:
        raise NoForeground("no support shot has foreground")

    if cfg.mode == "class_prototype_only":
        bg_level = []
        for feat, mask in zip(feats, fg_masks):
            bg_mask = 1.0 - pool_mask(mask, feat.shape[-2:]).to(feat.dtype)
            try:
                bg_level.append(class_prototype(feat, bg_mask).vector)
            except NoForeground:
                continue
        if not bg_level:
            raise DegenerateSupport("support masks leave no background")
        fg_vec = torch.stack([p.vector for p in fg_level]).mean(0)
        bg_vec = torch.stack(bg_level).mean(0)
        return PrototypeEnsemble([Prototype(bg_vec, 0, "class_level"), Prototype(fg_vec, 1, "class_level")])

    for feat, mask in zip(feats, fg_masks):
        protos.extend(local_prototypes(feat, mask, window, cfg.threshold))
    protos.extend(fg_level)
    if not any(p.class_id == 0 for p in protos):
        # near full-frame foreground: fall back to masked-average background
        for feat, mask in zip(feats, fg_masks):
            bg_mask = 1.0 - pool_mask(mask, feat.shape[-2:]).to(feat.dtype)
            try:
                p = class_prototype(feat, bg_mask)
            except NoForeground:
                continue
            protos.append(Prototype(p.vector, 0, "class_level"))
        if not any(p.class_id == 0 for p in protos):
            raise DegenerateSupport("support masks leave no background")
    return PrototypeEnsemble(protos)


# ---------------------------------------------------------------- classifier


def similarity_map(protos, feat, alpha: float = 20.0) -> torch.Tensor:
    """alpha * cosine between prototypes (K, D) and features (..., D, H, W).

    Returns (..., K, H, W). Zero-norm vectors give similarity 0.
    """
    protos = torch.as_tensor(protos)
    single = protos.dim() == 1
    if single:
        protos = protos[None]
    if protos.shape[-1] != feat.shape[-3]:
        raise ShapeMismatchError(f"prototype depth {protos.shape[-1]} != feature depth {feat.shape[-3]}")
    dots = torch.einsum("kd,...dhw->...khw", protos, feat)
    pn = protos.norm(dim=-1)
    fn = feat.norm(dim=-3).unsqueeze(-3)
    denom = pn.view(-1, 1, 1) * fn
    tiny = torch.finfo(feat.dtype).tiny
    sim = alpha * dots / denom.clamp_min(tiny)
    sim = torch.where(denom > 0, sim, torch.zeros_like(sim))
    return sim[..., 0, :, :] if single else sim


def fuse_class(similarities) -> torch.Tensor:
    """Per-pixel softmax-weighted sum over a class's prototype maps (K, ...)."""
    s = similarities if torch.is_tensor(similarities) else torch.stack(list(similarities))
    if s.shape[0] == 0:
        raise ValidationError("fuse_class needs at least one similarity map")
    if s.shape[0] == 1:
        return s[0]
    return (s * torch.softmax(s, dim=0)).sum(dim=0)


def class_scores(ens: PrototypeEnsemble, qfeat, alpha: float = 20.0) -> torch.Tensor:
    """Fused similarity per class, (..., 2, H', W') with class 0 background."""
    out = []
    for c in (0, 1):
        sims = similarity_map(ens.vectors(c), qfeat, alpha)  # (..., K, H', W')
        out.append(fuse_class(sims.movedim(-3, 0)))
    return torch.stack(out, dim=-3)


def predict(ens: PrototypeEnsemble, qfeat, out_size=None, alpha: float = 20.0) -> torch.Tensor:
    """Class probabilities (..., 2, H, W), upsampled bilinearly after the softmax."""
    probs = torch.softmax(class_scores(ens, qfeat, alpha), dim=-3)
    if out_size is not None and tuple(out_size) != tuple(probs.shape[-2:]):
        lead = probs.shape[:-3]
        flat = probs.reshape(-1, 2, *probs.shape[-2:])
        flat = F.interpolate(flat, size=tuple(out_size), mode="bilinear", align_corners=False)
        probs = flat.reshape(*lead, 2, *out_size)
    return probs


class ALPNet(nn.Module):
    """Encoder plus prototype classifier; ``window`` switches train/infer pooling."""

    def __init__(self, encoder: nn.Module, cfg: AlpConfig | None = None):
        super().__init__()
        self.encoder = encoder
        self.cfg = cfg or AlpConfig()

    def segment(self, support_feats, support_masks, query_feats, out_size, window=None):
        ens = build_ensemble(list(support_feats), list(support_masks), self.cfg, window)
        return predict(ens, query_feats, out_size, self.cfg.alpha)

    def forward(self, support_images, support_masks, query_images, window=None):
        """Query probabilities (Q, 2, H, W) plus the features used to get them."""
        k = support_images.shape[0]
        feats = encode(self.encoder, torch.cat([support_images, query_images]))
        s_feats, q_feats = feats[:k], feats[k:]
        out_size = query_images.shape[-2:]
        probs = self.segment(s_feats, support_masks, q_feats, out_size, window)
        return probs, s_feats, q_feats
