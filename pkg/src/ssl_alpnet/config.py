"""Run configuration: one JSON document, validated before any stage runs."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigError, ValidationError
from .losses import LossConfig
from .model import DESK_ENCODER, AlpConfig
from .superpixel import SuperpixelConfig
from .train import TrainConfig, config_hash
from .transforms import TransformConfig


@dataclass(frozen=True)
class DataConfig:
    root: str | None = None
    format: str = "raw"
    target_size: int = 256
    store_dir: str | None = None  # default: <root>/pseudolabels

    def __post_init__(self):
        if self.format not in ("raw", "nifti"):
            raise ValidationError(f"data.format must be 'raw' or 'nifti', got {self.format!r}")
        if self.target_size < 8:
            raise ValidationError("data.target_size must be >= 8")


@dataclass(frozen=True)
class EvalConfig:
    setting: int = 1
    fold: int = 0
    n_folds: int = 5
    test_group: list | str = "upper"
    classes: list | None = None  # default: the test group
    chunks: int = 3
    groups: dict | None = None

    def __post_init__(self):
        if self.setting not in (1, 2):
            raise ValidationError("eval.setting must be 1 or 2")
        if not 0 <= self.fold < self.n_folds:
            raise ValidationError("eval.fold must lie in [0, n_folds)")
        if self.chunks < 1:
            raise ValidationError("eval.chunks must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    superpixel: SuperpixelConfig = field(default_factory=SuperpixelConfig)
    transforms: TransformConfig = field(default_factory=TransformConfig)
    alp: AlpConfig = field(default_factory=AlpConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    encoder: dict = field(default_factory=lambda: dict(DESK_ENCODER))
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0

    def __post_init__(self):
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", dataclasses.replace(self.train, seed=self.seed))

    def to_dict(self) -> dict:
        out = {}
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if hasattr(v, "to_dict"):
                out[f.name] = v.to_dict()
            elif dataclasses.is_dataclass(v):
                out[f.name] = dataclasses.asdict(v)
            else:
                out[f.name] = v
        out["train"].pop("seed", None)
        return json.loads(json.dumps(out))

    def training_hash(self) -> str:
        """Hash of everything that influences the trained weights."""
        d = self.to_dict()
        return config_hash({k: d[k] for k in ("superpixel", "transforms", "alp", "loss", "train", "encoder",
                                               "seed")} | {"split": [d["eval"][k] for k in
                                                                     ("setting", "fold", "n_folds", "test_group")]})


SECTIONS = {
    "data": DataConfig,
    "superpixel": SuperpixelConfig,
    "transforms": TransformConfig,
    "alp": AlpConfig,
    "loss": LossConfig,
    "train": TrainConfig,
    "eval": EvalConfig,
}
ENCODER_KEYS = {"channels", "strides", "norm", "in_channels"}


def _section(name, cls, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    allowed = {f.name for f in dataclasses.fields(cls)}
    if name == "train":
        allowed.discard("seed")
    unknown = sorted(set(values) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {name!r}: {unknown}")
    kwargs = {k: tuple(v) if isinstance(v, list) and k not in ("classes", "test_group") else v
              for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"invalid {name!r} section: {exc}") from exc


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("configuration must be a JSON object")
    unknown = sorted(set(d) - set(SECTIONS) - {"encoder", "seed"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {unknown}")
    kwargs = {name: _section(name, cls, d[name]) for name, cls in SECTIONS.items() if name in d}
    if "encoder" in d:
        enc = d["encoder"]
        if not isinstance(enc, dict) or set(enc) - ENCODER_KEYS or not {"channels", "strides"} <= set(enc):
            raise ConfigError(f"encoder must be an object with channels/strides (allowed: {sorted(ENCODER_KEYS)})")
        if len(enc["channels"]) != len(enc["strides"]):
            raise ConfigError("encoder.channels and encoder.strides must have equal length")
        kwargs["encoder"] = dict(enc)
    if "seed" in d:
        if not isinstance(d["seed"], int):
            raise ConfigError("seed must be an integer")
        kwargs["seed"] = d["seed"]
    return RunConfig(**kwargs)


def load_config(path) -> RunConfig:
    p = Path(path)
    try:
        d = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {p} is not valid JSON: {exc}") from exc
    return config_from_dict(d)


def override(cfg: RunConfig, section: str, **values) -> RunConfig:
    """Return a copy with selected fields of one section replaced (None values ignored)."""
    values = {k: v for k, v in values.items() if v is not None}
    if not values:
        return cfg
    if section == "seed":
        return dataclasses.replace(cfg, seed=values["seed"])
    try:
        new = dataclasses.replace(getattr(cfg, section), **values)
    except (ValidationError, TypeError) as exc:
        raise ConfigError(f"invalid override for {section!r}: {exc}") from exc
    return dataclasses.replace(cfg, **{section: new})


def desk_config(seed: int = 0, iterations: int = 10_000) -> RunConfig:
    """Defaults sized for 64x64 phantom runs."""
    return RunConfig(
        data=DataConfig(target_size=64),
        superpixel=SuperpixelConfig(scale=100.0, smooth_sigma=0.8, min_size=20),
        transforms=TransformConfig(elastic_alpha=5.0, elastic_sigma=5.0),
        train=TrainConfig(iterations=iterations),
        eval=EvalConfig(setting=2, fold=0, test_group=["kidney"], classes=["kidney"]),
        seed=seed,
    )
