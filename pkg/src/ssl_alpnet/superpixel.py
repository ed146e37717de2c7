"""Offline superpixel pseudolabel generation (graph-based, union-find)."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

from .errors import ValidationError
from .kernels import raster_relabel, segment_graph


@dataclass(frozen=True)
class SuperpixelConfig:
    scale: float = 100.0
    smooth_sigma: float = 0.8
    min_size: int = 100
    connectivity: int = 4

    def __post_init__(self):
        if not self.scale > 0:
            raise ValidationError(f"scale must be > 0, got {self.scale}")
        if self.smooth_sigma < 0:
            raise ValidationError(f"smooth_sigma must be >= 0, got {self.smooth_sigma}")
        if int(self.min_size) != self.min_size or self.min_size < 1:
            raise ValidationError(f"min_size must be a positive integer, got {self.min_size}")
        if self.connectivity not in (4, 8):
            raise ValidationError(f"connectivity must be 4 or 8, got {self.connectivity}")

    def to_dict(self) -> dict:
        return asdict(self)


def grid_edges(h: int, w: int, connectivity: int = 4) -> tuple[np.ndarray, np.ndarray]:
    """Pixel-index pairs (a < b) of the 4- or 8-connected grid graph."""
    idx = np.arange(h * w, dtype=np.int64).reshape(h, w)
    pairs = [
        (idx[:, :-1], idx[:, 1:]),
        (idx[:-1, :], idx[1:, :]),
    ]
    if connectivity == 8:
        pairs.append((idx[:-1, :-1], idx[1:, 1:]))
        pairs.append((idx[:-1, 1:], idx[1:, :-1]))
    a = np.concatenate([p[0].ravel() for p in pairs])
    b = np.concatenate([p[1].ravel() for p in pairs])
    return a, b


def segment_slice(image: np.ndarray, config: SuperpixelConfig | None = None) -> np.ndarray:
    """Partition a 2D slice in [0, 1] into superpixels.

    Returns an int64 label map with contiguous ids assigned in raster order of
    each segment's first pixel.
    """
    config = config or SuperpixelConfig()
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2 or image.shape[0] < 2 or image.shape[1] < 2:
        raise ValidationError(f"expected a 2D image of at least 2x2, got shape {image.shape}")
    if not np.all(np.isfinite(image)):
        raise ValidationError("image contains non-finite values")

    h, w = image.shape
    scaled = image * 255.0
    if config.smooth_sigma > 0:
        scaled = ndimage.gaussian_filter(scaled, config.smooth_sigma, mode="nearest", truncate=4.0)
    flat = scaled.ravel()

    a, b = grid_edges(h, w, config.connectivity)
    weights = np.abs(flat[a] - flat[b])
    order = np.lexsort((b, a, weights))
    parent = segment_graph(
        h * w, a[order], b[order], weights[order], float(config.scale), int(config.min_size)
    )
    return raster_relabel(parent).reshape(h, w)


def labelmap_to_masks(labels: np.ndarray) -> list[np.ndarray]:
    """One boolean mask per label id, ordered by id."""
    n = int(labels.max()) + 1 if labels.size else 0
    return [labels == i for i in range(n)]


@dataclass
class PseudolabelSet:
    """Per-slice superpixel label maps for one volume.

    Slices that segment into a single region are flagged and yield no
    candidates for episode sampling.
    """

    volume_id: str
    config: SuperpixelConfig
    label_maps: np.ndarray  # (S, H, W) int
    flagged: list[int] = field(default_factory=list)

    def __len__(self) -> int:
        return self.label_maps.shape[0]

    def n_candidates(self, slice_index: int) -> int:
        return int(self.label_maps[slice_index].max()) + 1

    def masks(self, slice_index: int) -> list[np.ndarray]:
        return labelmap_to_masks(self.label_maps[slice_index])

    def candidates(self, slice_index: int) -> list[np.ndarray]:
        """Masks usable as episode pseudolabels (empty for flagged slices)."""
        if slice_index in self.flagged:
            return []
        return self.masks(slice_index)

    def usable_slices(self) -> list[int]:
        flagged = set(self.flagged)
        return [i for i in range(len(self)) if i not in flagged]


def build_pseudolabel_set(volume, config: SuperpixelConfig | None = None) -> PseudolabelSet:
    config = config or SuperpixelConfig()
    vol = np.asarray(volume.intensities)
    if vol.ndim != 3 or vol.shape[0] == 0:
        raise ValidationError(f"volume {volume.id!r} has no slices")
    maps = np.stack([segment_slice(s, config) for s in vol]).astype(np.int32)
    flagged = [i for i in range(maps.shape[0]) if maps[i].max() == 0]
    return PseudolabelSet(volume.id, config, maps, flagged)
