"""SSL and inference episode composition."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import slice_sample
from .errors import ValidationError
from .transforms import (
    GeometricTransform,
    IntensityTransform,
    TransformConfig,
    apply_gamma,
    sample_geometric,
    sample_intensity,
    warp,
    warp_mask,
)


class SkipSlice(Exception):
    """The slice cannot yield a valid episode; the sampler should draw another."""


@dataclass
class Episode:
    support: list  # [(image (3, H, W), fg (H, W) bool, bg (H, W) bool)]
    query: list  # [(image (3, H, W), fg or None, bg or None)]
    n_ways: int = 1
    n_shots: int = 1
    provenance: str = "ssl"
    class_id: str | None = None
    # SSL bookkeeping, enough to re-derive the query from the support
    geometric: GeometricTransform | None = None
    intensity: IntensityTransform | None = None
    superpixel_index: int | None = None
    source: tuple | None = field(default=None)  # (volume_id, slice_index)


def compose_ssl_episode(sample, pl, cfg: TransformConfig, rng) -> Episode:
    """One 1-way 1-shot episode: a random superpixel against the rest.

    The support keeps the original slice; the query is the gamma-adjusted then
    geometrically warped slice with the warped superpixel as its target.
    """
    cands = pl.candidates(sample.slice_index)
    if not cands:
        raise SkipSlice(f"{sample.volume_id}:{sample.slice_index} has no usable superpixels")
    r = int(rng.integers(len(cands)))
    fg = cands[r]
    plane = sample.image[0]
    h, w = plane.shape

    gt = sample_geometric(cfg, rng, (h, w))
    it = sample_intensity(cfg, rng)
    q_plane = warp(apply_gamma(plane, it), gt, "bilinear").astype(np.float32)
    q_fg = warp_mask(fg, gt, "nearest")
    if not q_fg.any():
        raise SkipSlice("superpixel left the frame after warping")

    return Episode(
        support=[(sample.image, fg, ~fg)],
        query=[(np.repeat(q_plane[None], 3, axis=0), q_fg, ~q_fg)],
        n_ways=1,
        n_shots=1,
        provenance="ssl",
        class_id="pseudo",
        geometric=gt,
        intensity=it,
        superpixel_index=r,
        source=(sample.volume_id, sample.slice_index),
    )


def compose_inference_episode(support_slices, query_slices, class_id, support_volume=None,
                              query_volume=None, allow_same_volume=False) -> Episode:
    """1-way K-shot episode from labeled support slices and unlabeled queries."""
    if not support_slices:
        raise ValidationError("at least one support slice is required")
    if not allow_same_volume and support_volume is not None and support_volume == query_volume:
        raise ValidationError(f"support and query must come from different volumes, both are {support_volume!r}")
    support = []
    for image, mask in support_slices:
        mask = np.asarray(mask, dtype=bool)
        support.append((_as_three_channel(image), mask, ~mask))
    if not any(fg.any() for _, fg, _ in support):
        raise ValidationError(f"support masks for class {class_id!r} are all empty")
    query = [(_as_three_channel(q), None, None) for q in query_slices]
    return Episode(support, query, 1, len(support), "labeled", class_id)


def _as_three_channel(image) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 2:
        return np.repeat(image[None], 3, axis=0)
    return image


class EpisodeSampler:
    """Uniform (volume, slice) sampling over the usable training slices."""

    def __init__(self, volumes, pseudolabels: dict, cfg: TransformConfig, excluded=(), max_tries: int = 100):
        self.volumes = {v.id: v for v in volumes}
        self.pseudolabels = pseudolabels
        self.cfg = cfg
        self.max_tries = max_tries
        excluded = {(str(a), int(b)) for a, b in excluded}
        self.pool = [
            (vid, s)
            for vid in sorted(self.volumes)
            for s in pseudolabels[vid].usable_slices()
            if (vid, s) not in excluded
        ]
        if not self.pool:
            raise ValidationError("no usable training slices after flagging and exclusion")

    def sample(self, rng) -> Episode:
        for _ in range(self.max_tries):
            vid, s = self.pool[int(rng.integers(len(self.pool)))]
            try:
                return compose_ssl_episode(
                    slice_sample(self.volumes[vid], s), self.pseudolabels[vid], self.cfg, rng
                )
            except SkipSlice:
                continue
        raise RuntimeError(f"could not compose a valid episode in {self.max_tries} attempts")
