"""Random geometric (affine + elastic) and gamma transforms for episode composition."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ValidationError


@dataclass(frozen=True)
class TransformConfig:
    rotation_deg: tuple = (-30.0, 30.0)
    scale: tuple = (0.8, 1.2)
    shear_deg: tuple = (-10.0, 10.0)
    translate_frac: tuple = (-0.05, 0.05)
    elastic_alpha: float = 20.0
    elastic_sigma: float = 20.0
    gamma_log_range: tuple = (float(np.log(0.5)), float(np.log(2.0)))
    enable_geometric: bool = True
    enable_intensity: bool = True

    def __post_init__(self):
        for name in ("rotation_deg", "scale", "shear_deg", "translate_frac", "gamma_log_range"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValidationError(f"{name} range is not ordered: {lo} > {hi}")
            object.__setattr__(self, name, (float(lo), float(hi)))
        if self.scale[0] <= 0:
            raise ValidationError(f"scale range must be strictly positive, got {self.scale}")
        if self.elastic_alpha < 0 or self.elastic_sigma < 0:
            raise ValidationError("elastic_alpha and elastic_sigma must be >= 0")

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


@dataclass
class GeometricTransform:
    """Backward sampling map: output pixel p reads input at ``affine @ (p + d(p))``.

    ``affine`` is 2x3 in (row, col) pixel coordinates; ``elastic`` is (2, H, W)
    displacements in pixels, or None for no deformation.
    """

    affine: np.ndarray
    elastic: np.ndarray | None = None

    @classmethod
    def identity(cls) -> "GeometricTransform":
        return cls(np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]), None)

    def sample_grid(self, shape) -> np.ndarray:
        h, w = shape
        grid = np.mgrid[0:h, 0:w].astype(np.float64)
        if self.elastic is not None:
            if self.elastic.shape[1:] != (h, w):
                raise ValidationError(f"elastic field {self.elastic.shape[1:]} does not match image {shape}")
            grid = grid + self.elastic
        a = self.affine
        rows = a[0, 0] * grid[0] + a[0, 1] * grid[1] + a[0, 2]
        cols = a[1, 0] * grid[0] + a[1, 1] * grid[1] + a[1, 2]
        return np.stack([rows, cols])


@dataclass
class IntensityTransform:
    gamma: float = 1.0

    def __post_init__(self):
        if not self.gamma > 0:
            raise ValidationError(f"gamma must be > 0, got {self.gamma}")


def _affine_about_centre(shape, rot, scale, shear, translate) -> np.ndarray:
    h, w = shape
    c = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
    cos, sin = np.cos(rot), np.sin(rot)
    rotation = np.array([[cos, -sin], [sin, cos]])
    shearing = np.array([[1.0, 0.0], [np.tan(shear), 1.0]])
    forward = rotation @ shearing * scale
    inverse = np.linalg.inv(forward)
    t = np.array([translate[0] * h, translate[1] * w])
    # output p <- input inverse @ (p - c - t) + c
    offset = c - inverse @ (c + t)
    return np.hstack([inverse, offset[:, None]])


def sample_geometric(cfg: TransformConfig, rng, shape=(256, 256)) -> GeometricTransform:
    """Draw an affine (about the image centre) followed by a smooth elastic field."""
    if not cfg.enable_geometric:
        return GeometricTransform.identity()
    rot = np.deg2rad(rng.uniform(*cfg.rotation_deg))
    scale = rng.uniform(*cfg.scale)
    shear = np.deg2rad(rng.uniform(*cfg.shear_deg))
    translate = rng.uniform(*cfg.translate_frac, size=2)
    affine = _affine_about_centre(shape, rot, scale, shear, translate)

    elastic = None
    if cfg.elastic_alpha > 0:
        noise = rng.uniform(-1.0, 1.0, size=(2, *shape))
        if cfg.elastic_sigma > 0:
            noise = np.stack([ndimage.gaussian_filter(n, cfg.elastic_sigma, mode="reflect") for n in noise])
        # rescale so the largest displacement magnitude equals alpha
        peak = np.abs(noise).max()
        elastic = noise * (cfg.elastic_alpha / peak) if peak > 0 else np.zeros_like(noise)
    return GeometricTransform(affine, elastic)


def sample_intensity(cfg: TransformConfig, rng) -> IntensityTransform:
    if not cfg.enable_intensity:
        return IntensityTransform(1.0)
    return IntensityTransform(float(np.exp(rng.uniform(*cfg.gamma_log_range))))


def warp(image: np.ndarray, t: GeometricTransform, interp: str = "bilinear") -> np.ndarray:
    """Resample a 2D grid (or a leading-channel stack) through ``t``; zeros outside."""
    order = {"bilinear": 1, "nearest": 0}[interp]
    image = np.asarray(image)
    if image.ndim == 3:
        return np.stack([warp(c, t, interp) for c in image])
    grid = t.sample_grid(image.shape)
    out = ndimage.map_coordinates(image.astype(np.float64), grid, order=order, mode="constant", cval=0.0)
    return out.astype(image.dtype if image.dtype != bool else np.float64)


def warp_mask(mask: np.ndarray, t: GeometricTransform, interp: str = "nearest") -> np.ndarray:
    """Warp a binary mask and re-binarize at 0.5."""
    return warp(np.asarray(mask, dtype=np.float64), t, interp) >= 0.5


def apply_gamma(image: np.ndarray, t: IntensityTransform) -> np.ndarray:
    image = np.asarray(image)
    if image.size and (image.min() < 0 or image.max() > 1):
        raise ValidationError("gamma transform expects intensities in [0, 1]; normalize upstream")
    return np.power(image, t.gamma)
