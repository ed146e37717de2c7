"""Volume ingestion, preprocessing, synthetic phantoms and fold partitioning."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import ShapeMismatchError, ValidationError, VolumeReadError

# clinical grouping used for setting-2 exclusion on abdominal data
DEFAULT_GROUPS = {
    "upper": ["liver", "spleen"],
    "lower": ["left_kidney", "right_kidney", "kidney"],
}

CT_WINDOW = (-125.0, 275.0)
PERCENTILES = (0.5, 99.5)


@dataclass
class Volume:
    id: str
    intensities: np.ndarray  # (S, H, W) float32
    labels: dict = field(default_factory=dict)  # class name -> (S, H, W) bool
    class_ids: dict = field(default_factory=dict)  # class name -> integer id
    modality: str = "synthetic"
    spacing: tuple = (1.0, 1.0, 1.0)
    normalized: bool = False

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities, dtype=np.float32)
        if self.intensities.ndim != 3:
            raise ValidationError(f"volume {self.id!r}: expected 3D intensities, got {self.intensities.shape}")
        for name, lab in self.labels.items():
            if lab.shape != self.intensities.shape:
                raise ShapeMismatchError(
                    f"volume {self.id!r}: label {name!r} shape {lab.shape} != image {self.intensities.shape}"
                )
            self.labels[name] = np.asarray(lab, dtype=bool)
        for i, name in enumerate(sorted(self.labels)):
            self.class_ids.setdefault(name, i + 1)

    @property
    def n_slices(self) -> int:
        return self.intensities.shape[0]

    def class_extent(self, name: str) -> tuple[int, int] | None:
        """Inclusive (top, bottom) slice range containing ``name``, or None."""
        present = np.flatnonzero(self.labels[name].any(axis=(1, 2))) if name in self.labels else []
        if len(present) == 0:
            return None
        return int(present[0]), int(present[-1])

    def label_map(self) -> np.ndarray:
        out = np.zeros(self.intensities.shape, dtype=np.float32)
        for name, lab in self.labels.items():
            out[lab] = self.class_ids[name]
        return out


@dataclass
class SliceSample:
    volume_id: str
    slice_index: int
    image: np.ndarray  # (3, H, W), identical channel planes
    masks: dict  # class name -> (H, W) bool


def slice_sample(volume: Volume, index: int) -> SliceSample:
    plane = volume.intensities[index]
    return SliceSample(
        volume.id,
        index,
        np.repeat(plane[None], 3, axis=0),
        {k: v[index] for k, v in volume.labels.items()},
    )


# ---------------------------------------------------------------- preprocessing


def resize_slices(arr: np.ndarray, size: int, order: int) -> np.ndarray:
    """Resize each slice of (S, H, W) to size x size; order 1 bilinear, 0 nearest."""
    s, h, w = arr.shape
    if (h, w) == (size, size):
        return arr
    ys = (np.arange(size) + 0.5) * h / size - 0.5
    xs = (np.arange(size) + 0.5) * w / size - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((s, size, size), dtype=arr.dtype)
    for i in range(s):
        out[i] = ndimage.map_coordinates(arr[i], [gy, gx], order=order, mode="nearest")
    return out


def normalize_intensities(x: np.ndarray, modality: str, ct_window=CT_WINDOW) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if modality.upper() == "CT":
        lo, hi = ct_window
    else:
        # lower/higher picks keep the clip idempotent: tails collapse onto exact 0 and 1
        lo = np.percentile(x, PERCENTILES[0], method="lower")
        hi = np.percentile(x, PERCENTILES[1], method="higher")
    x = np.clip(x, lo, hi)
    if hi > lo:
        x = (x - lo) / (hi - lo)
    else:
        x = np.clip(x, 0.0, 1.0)
    return x.astype(np.float32)


def preprocess(volume: Volume, target_size: int = 256, ct_window=CT_WINDOW) -> Volume:
    """Normalize to [0, 1] and resize slices; a no-op on preprocessed volumes."""
    x = volume.intensities
    if not volume.normalized:
        x = normalize_intensities(x, volume.modality, ct_window)
    x = np.clip(resize_slices(x, target_size, order=1), 0.0, 1.0)
    labels = {
        k: resize_slices(v.astype(np.uint8), target_size, order=0).astype(bool)
        for k, v in volume.labels.items()
    }
    return Volume(volume.id, x, labels, dict(volume.class_ids), volume.modality, tuple(volume.spacing), True)


# ---------------------------------------------------------------- raw container


def _container_paths(path) -> tuple[Path, Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".json", ".raw") else p
    return stem.with_suffix(".json"), stem.with_suffix(".raw"), Path(str(stem) + ".label.raw")


def save_volume(volume: Volume, path) -> Path:
    """Write the portable container: JSON header + little-endian float32 payload."""
    header_p, raw_p, label_p = _container_paths(path)
    header_p.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "shape": [int(v) for v in volume.intensities.shape],
        "dtype": "f32le",
        "classes": {k: int(v) for k, v in sorted(volume.class_ids.items())},
        "spacing": [float(v) for v in volume.spacing],
        "modality": volume.modality,
        "normalized": bool(volume.normalized),
    }
    header_p.write_text(json.dumps(header, sort_keys=True) + "\n")
    raw_p.write_bytes(np.ascontiguousarray(volume.intensities, dtype="<f4").tobytes())
    if volume.labels:
        label_p.write_bytes(np.ascontiguousarray(volume.label_map(), dtype="<f4").tobytes())
    return header_p


def read_raw(path) -> Volume:
    header_p, raw_p, label_p = _container_paths(path)
    try:
        header = json.loads(header_p.read_text())
        shape = tuple(header["shape"])
        if header.get("dtype", "f32le") != "f32le":
            raise VolumeReadError(f"{header_p}: unsupported dtype {header['dtype']!r}")
        payload = np.frombuffer(raw_p.read_bytes(), dtype="<f4")
    except (OSError, ValueError, KeyError) as exc:
        raise VolumeReadError(f"cannot read volume {header_p}: {exc}") from exc
    if payload.size != int(np.prod(shape)):
        raise VolumeReadError(f"{raw_p}: payload has {payload.size} values, header shape {shape}")
    classes = {k: int(v) for k, v in header.get("classes", {}).items()}
    labels = {}
    if classes:
        if not label_p.exists():
            raise VolumeReadError(f"{header_p} declares classes but {label_p} is missing")
        lab = np.frombuffer(label_p.read_bytes(), dtype="<f4")
        if lab.size != payload.size:
            raise ShapeMismatchError(f"{label_p}: {lab.size} label values for image of {payload.size}")
        lab = lab.reshape(shape)
        labels = {k: lab == v for k, v in classes.items()}
    return Volume(
        header_p.stem,
        payload.reshape(shape).copy(),
        labels,
        classes,
        header.get("modality", "synthetic"),
        tuple(header.get("spacing", (1.0, 1.0, 1.0))),
        bool(header.get("normalized", False)),
    )


def read_nifti(path, label_path=None, classes=None, modality="MRI") -> Volume:
    """Read a NIfTI image (and optional integer label image) as (S, H, W)."""
    try:
        import nibabel as nib
    except ImportError as exc:  # pragma: no cover - exercised only without the extra
        raise VolumeReadError("NIfTI support requires nibabel (pip install 'ssl-alpnet[nifti]')") from exc
    path = Path(path)
    try:
        img = nib.load(str(path))
        x = np.asarray(img.get_fdata(), dtype=np.float32).transpose(2, 1, 0)
        spacing = tuple(float(z) for z in img.header.get_zooms()[:3][::-1])
    except Exception as exc:
        raise VolumeReadError(f"cannot read NIfTI {path}: {exc}") from exc
    labels = {}
    classes = dict(classes or {})
    if label_path is not None:
        try:
            lab = np.asarray(nib.load(str(label_path)).get_fdata()).transpose(2, 1, 0)
        except Exception as exc:
            raise VolumeReadError(f"cannot read NIfTI labels {label_path}: {exc}") from exc
        if lab.shape != x.shape:
            raise ShapeMismatchError(f"{label_path}: label shape {lab.shape} != image shape {x.shape}")
        if not classes:
            classes = {f"class_{int(v)}": int(v) for v in np.unique(lab) if v != 0}
        labels = {k: np.rint(lab) == v for k, v in classes.items()}
    vol_id = path.name.split(".")[0]
    return Volume(vol_id, x, labels, classes, modality, spacing, False)


def load_and_preprocess(path, target_size: int = 256, fmt: str | None = None, **kw) -> Volume:
    p = Path(path)
    if fmt is None:
        fmt = "nifti" if p.name.endswith((".nii", ".nii.gz")) else "raw"
    if fmt == "raw":
        if not _container_paths(p)[0].exists():
            raise VolumeReadError(f"no such volume: {p}")
        vol = read_raw(p)
    elif fmt == "nifti":
        if not p.exists():
            raise VolumeReadError(f"no such volume: {p}")
        vol = read_nifti(p, **kw)
    else:
        raise ValidationError(f"unknown volume format {fmt!r}")
    return preprocess(vol, target_size)


def discover_volumes(root, fmt: str = "raw", target_size: int = 256) -> list[Volume]:
    """Load every volume under a data root.

    raw: every ``*.json`` header. nifti: every ``*.nii[.gz]`` not ending in
    ``_label``; labels are read from the matching ``<id>_label.nii.gz`` with
    class ids from an optional ``classes.json``.
    """
    root = Path(root)
    if not root.is_dir():
        raise VolumeReadError(f"data root does not exist: {root}")
    if fmt == "raw":
        return [load_and_preprocess(p, target_size, "raw") for p in sorted(root.glob("*.json"))
                if p.name != "classes.json"]
    classes = json.loads((root / "classes.json").read_text()) if (root / "classes.json").exists() else None
    vols = []
    for p in sorted(root.glob("*.nii*")):
        vid = p.name.split(".")[0]
        if vid.endswith("_label"):
            continue
        lab = sorted(root.glob(f"{vid}_label.nii*"))
        vols.append(load_and_preprocess(p, target_size, "nifti", label_path=lab[0] if lab else None,
                                        classes=classes))
    return vols


# ---------------------------------------------------------------- phantoms

PHANTOM_ORGANS = {
    # name: (intensity, in-plane centre (y, x) as fraction, radii (ry, rx) fraction, z centre, z half-extent)
    "liver": (0.62, (0.45, 0.32), (0.22, 0.17), 0.30, 0.26),
    "spleen": (0.80, (0.42, 0.72), (0.12, 0.09), 0.33, 0.17),
    "kidney": (0.48, (0.60, 0.29), (0.11, 0.08), 0.70, 0.18),
}


def _smooth_noise(rng, shape, sigma, amplitude):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return amplitude * n / (np.abs(n).max() + 1e-12)


def make_phantom_dataset(
    n_volumes: int = 20,
    n_slices: int = 24,
    size: int = 64,
    n_classes: int = 3,
    rng=None,
) -> list[Volume]:
    """Synthetic abdomen-like volumes with ellipsoidal organs.

    Each volume has a textured body ellipse on a dark field, a bright unlabeled
    spine disk, and ``n_classes`` labeled organs with distinct intensity bands.
    Pose, size and gain vary per volume. Organ z-extents are contiguous because
    organs are convex.
    """
    if n_classes < 2:
        raise ValidationError("n_classes must be >= 2")
    if size < 32:
        raise ValidationError("size must be >= 32")
    rng = np.random.default_rng(rng)
    organs = dict(list(PHANTOM_ORGANS.items())[:n_classes])
    for i in range(len(organs), n_classes):
        organs[f"organ_{i}"] = (0.3 + 0.6 * rng.random(), (0.3 + 0.4 * rng.random(), 0.3 + 0.4 * rng.random()),
                                (0.08, 0.08), 0.2 + 0.6 * rng.random(), 0.15)
    names = list(organs)

    zz = np.arange(n_slices)[:, None, None] / max(n_slices - 1, 1)
    yy = (np.arange(size)[None, :, None] + 0.5) / size
    xx = (np.arange(size)[None, None, :] + 0.5) / size

    vols = []
    for v in range(n_volumes):
        cy, cx = 0.5 + 0.03 * rng.standard_normal(2)
        ry, rx = (0.36, 0.44) * (1 + 0.06 * rng.standard_normal(2))
        body = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        body = np.broadcast_to(body, (n_slices, size, size))
        img = np.full((n_slices, size, size), 0.05)
        img = np.where(body, 0.30, img)
        img = img + np.where(body, _smooth_noise(rng, img.shape, (1.5, 3.0, 3.0), 0.06), 0.0)
        inner = ((yy - cy) / (ry - 0.04)) ** 2 + ((xx - cx) / (rx - 0.04)) ** 2 <= 1.0
        img = np.where(body & ~np.broadcast_to(inner, body.shape), 0.42, img)

        # unlabeled dark bowel loops at random positions
        for _ in range(rng.integers(2, 5)):
            by, bx = cy + 0.5 * ry * rng.uniform(-1, 1), cx + 0.5 * rx * rng.uniform(-1, 1)
            br, bz, bzh = rng.uniform(0.04, 0.08), rng.random(), rng.uniform(0.1, 0.3)
            blob = ((yy - by) / br) ** 2 + ((xx - bx) / br) ** 2 + ((zz - bz) / bzh) ** 2 <= 1.0
            img = np.where(blob & body, rng.uniform(0.12, 0.22), img)

        # unlabeled distractor: bright spine disk near the posterior edge
        sy, sx = cy + 0.24 * ry / 0.36, cx + 0.02 * rng.standard_normal()
        spine = ((yy - sy) / 0.06) ** 2 + ((xx - sx) / 0.06) ** 2 <= 1.0
        img = np.where(np.broadcast_to(spine, img.shape), 0.95, img)

        labels = {}
        for name in names:
            inten, (oy, ox), (ory, orx), oz, ozh = organs[name]
            oy, ox = oy + 0.03 * rng.standard_normal(), ox + 0.03 * rng.standard_normal()
            ory, orx = ory * (1 + 0.1 * rng.standard_normal()), orx * (1 + 0.1 * rng.standard_normal())
            oz = oz + 0.04 * rng.standard_normal()
            ozh = max(ozh * (1 + 0.1 * rng.standard_normal()), 4.0 / n_slices)
            theta = 0.3 * rng.standard_normal()
            dy, dx = yy - oy, xx - ox
            u = dy * np.cos(theta) + dx * np.sin(theta)
            w = -dy * np.sin(theta) + dx * np.cos(theta)
            ell = (u / ory) ** 2 + (w / orx) ** 2 + ((zz - oz) / ozh) ** 2 <= 1.0
            if name == "kidney":
                # paired organ mirrored across the body midline
                w2 = -dy * np.sin(-theta) + (xx - (2 * cx - ox)) * np.cos(-theta)
                u2 = dy * np.cos(-theta) + (xx - (2 * cx - ox)) * np.sin(-theta)
                ell = ell | ((u2 / ory) ** 2 + (w2 / orx) ** 2 + ((zz - oz) / ozh) ** 2 <= 1.0)
            ell &= body
            for other in labels.values():
                ell &= ~other
            labels[name] = ell
            tex = _smooth_noise(rng, img.shape, (1.0, 2.0, 2.0), 0.03)
            img = np.where(ell, inten + 0.04 * rng.standard_normal() + tex, img)

        gain = 1.0 + 0.1 * rng.standard_normal()
        img = img * gain + 0.01 * rng.standard_normal(img.shape)
        vol = Volume(f"phantom_{v:03d}", img.astype(np.float32), labels,
                     {n: i + 1 for i, n in enumerate(names)}, "synthetic")
        vols.append(preprocess(vol, size))
    return vols


# ---------------------------------------------------------------- partitioning


@dataclass
class DatasetSplit:
    fold: int
    train_ids: list
    test_ids: list
    train_classes: list
    test_classes: list
    setting: int
    excluded: list  # (volume_id, slice_index) pairs removed from training (setting 2)


def resolve_group(test_group, available, groups=None) -> list[str]:
    """Turn a group name or list of class names into concrete class names."""
    groups = DEFAULT_GROUPS if groups is None else groups
    if isinstance(test_group, str):
        names = groups[test_group] if test_group in groups else test_group.split(",")
        if test_group in groups:
            names = [n for n in names if n in available]
            if not names:
                raise ValidationError(f"group {test_group!r} has no class present in {sorted(available)}")
    else:
        names = list(test_group)
    unknown = [n for n in names if n not in available]
    if unknown:
        raise ValidationError(f"unknown class id(s) {unknown}; known: {sorted(available)}")
    return names


def partition(dataset: list[Volume], fold: int, setting: int, test_group, n_folds: int = 5,
              groups=None) -> DatasetSplit:
    if setting not in (1, 2):
        raise ValidationError(f"setting must be 1 or 2, got {setting}")
    if not 0 <= fold < n_folds:
        raise ValidationError(f"fold must be in [0, {n_folds}), got {fold}")
    available = sorted({c for v in dataset for c in v.labels})
    test_classes = resolve_group(test_group, available, groups)
    train_classes = [c for c in available if c not in test_classes]

    ids = sorted(v.id for v in dataset)
    test_ids = [str(i) for i in np.array_split(np.array(ids, dtype=object), n_folds)[fold]]
    train_ids = [i for i in ids if i not in test_ids]

    excluded = []
    if setting == 2:
        by_id = {v.id: v for v in dataset}
        for vid in train_ids:
            vol = by_id[vid]
            hit = np.zeros(vol.n_slices, dtype=bool)
            for c in test_classes:
                if c in vol.labels:
                    hit |= vol.labels[c].any(axis=(1, 2))
            excluded.extend((vid, int(s)) for s in np.flatnonzero(hit))
    return DatasetSplit(fold, train_ids, test_ids, train_classes, test_classes, setting, excluded)
