"""Run configuration: YAML file with data/model/losses/train/sequence sections."""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path
from typing import Any

import yaml

from .dihedral import ALL_TRANSFORMS, Transform, parse_allow
from .errors import ConfigError
from .losses import LossWeights
from .trainer import METHODS, ModelConfig, TrainConfig

DATA_ROOT_ENV = "AERIAL_ICL_DATA_ROOT"


@dataclass
class SynthSection:
    num_tiles: int = 250  # total, including the test tiles
    test_tiles: int = 50
    size: int = 64
    num_classes: int = 4
    channels: int = 3
    presence: float = 0.5


@dataclass
class DataSection:
    dataset: str | None = None  # prepared dataset directory
    source: str | None = None  # raw source: Potsdam-format dir or a synth dataset dir
    modality: str = "RGB"
    patch: int = 512
    overlap: int = 12
    val_fraction: float = 0.15
    test_rasters: list[str] = field(default_factory=list)
    test_fraction: float = 0.2  # of rasters, when test_rasters is empty
    synthetic: SynthSection = field(default_factory=SynthSection)


@dataclass
class ModelSection:
    widths: list[int] = field(default_factory=lambda: [16, 32, 64])
    feature_dim: int = 16
    encoder_weights: str | None = None
    expand_to_rgbir: bool = False


@dataclass
class LossSection:
    method: str = "mib+cd"
    lambda_kd: float = 1.0
    eta_inv_seg: float = 0.1
    rho_inv_kd: float = 0.1
    paired_kd: bool = True
    ignore_index: int | None = None


@dataclass
class TrainSection:
    epochs: int = 80
    batch_size: int = 8
    lr: float = 1e-3
    late_lr: float = 1e-4
    late_steps: list[int] | None = None
    weight_decay: float = 1e-2
    transforms: list[str] = field(default_factory=lambda: [t.value for t in ALL_TRANSFORMS])
    eval_batch_size: int = 32


@dataclass
class SequenceSection:
    name: str | list = "5S"


@dataclass
class RunConfig:
    seed: int = 0
    deterministic: bool = True
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    losses: LossSection = field(default_factory=LossSection)
    train: TrainSection = field(default_factory=TrainSection)
    sequence: SequenceSection = field(default_factory=SequenceSection)

    def to_dict(self) -> dict:
        return asdict(self)

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def validate(self) -> None:
        problems = []
        d, m, lo, tr = self.data, self.model, self.losses, self.train
        if d.modality.upper() not in ("RGB", "RGBIR"):
            problems.append(f"data.modality must be RGB or RGBIR, got {d.modality!r}")
        if not 0 <= d.overlap < d.patch:
            problems.append("data.overlap must satisfy 0 <= overlap < patch")
        if not 0 <= d.val_fraction < 1:
            problems.append("data.val_fraction must be in [0, 1)")
        if not 0 <= d.test_fraction < 1:
            problems.append("data.test_fraction must be in [0, 1)")
        s = d.synthetic
        if s.num_classes < 2:
            problems.append("data.synthetic.num_classes must be >= 2")
        if s.size < 16:
            problems.append("data.synthetic.size must be >= 16")
        if s.channels not in (3, 4):
            problems.append("data.synthetic.channels must be 3 or 4")
        if not 0 <= s.test_tiles < s.num_tiles:
            problems.append("data.synthetic.test_tiles must satisfy 0 <= test_tiles < num_tiles")
        if not m.widths or any(w < 1 for w in m.widths):
            problems.append("model.widths must be a non-empty list of positive ints")
        if m.feature_dim < 1:
            problems.append("model.feature_dim must be positive")
        if lo.method not in METHODS:
            problems.append(f"losses.method must be one of {sorted(METHODS)}, got {lo.method!r}")
        for name in ("lambda_kd", "eta_inv_seg", "rho_inv_kd"):
            if getattr(lo, name) < 0:
                problems.append(f"losses.{name} must be >= 0")
        if tr.epochs < 1:
            problems.append("train.epochs must be positive")
        if tr.batch_size < 1:
            problems.append("train.batch_size must be positive")
        if not (tr.lr > 0 and tr.late_lr > 0):
            problems.append("train.lr and train.late_lr must be > 0")
        try:
            if not parse_allow(tr.transforms):
                problems.append("train.transforms must not be empty")
        except ValueError as exc:
            problems.append(f"train.transforms: {exc}")
        if problems:
            raise ConfigError(problems)

    def train_config(self) -> TrainConfig:
        """Method preset first, then the explicit loss weights it leaves active."""
        lo = self.losses
        preset = METHODS[lo.method]
        pw = preset["weights"]
        weights = LossWeights(
            lo.lambda_kd if pw.lambda_kd > 0 else 0.0,
            lo.eta_inv_seg if pw.eta_inv_seg > 0 else 0.0,
            lo.rho_inv_kd if pw.rho_inv_kd > 0 else 0.0,
        )
        tr = self.train
        return TrainConfig(
            epochs=tr.epochs,
            batch_size=tr.batch_size,
            lr=tr.lr,
            late_lr=tr.late_lr,
            late_steps=tr.late_steps,
            weight_decay=tr.weight_decay,
            seed=self.seed,
            weights=weights,
            ce=preset["ce"],
            classifier_init=preset["classifier_init"],
            paired_kd=lo.paired_kd,
            transforms=parse_allow(tr.transforms),
            val_fraction=self.data.val_fraction,
            ignore_index=lo.ignore_index,
            eval_batch_size=tr.eval_batch_size,
            deterministic=self.deterministic,
        )

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(tuple(m.widths), m.feature_dim, m.encoder_weights, m.expand_to_rgbir)


def _build(cls, data: Any, path: str, problems: list[str]):
    if not isinstance(data, dict):
        problems.append(f"{path or 'config'}: expected a mapping")
        return cls()
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            problems.append(f"{path}{key}: unknown key")
            continue
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value or {}, f"{path}{key}.", problems)
        else:
            kwargs[key] = value
    return cls(**kwargs)


def from_dict(data: dict) -> RunConfig:
    problems: list[str] = []
    cfg = _build(RunConfig, data or {}, "", problems)
    if problems:
        raise ConfigError(problems)
    return cfg


def load_config(path: str | os.PathLike | None = None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = yaml.safe_load(Path(path).read_text()) or {}
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML ({exc})") from exc
    return from_dict(data)


def set_path(cfg: RunConfig, dotted: str, raw: str) -> None:
    """Apply a ``section.key=value`` override; the value is parsed as YAML."""
    parts = dotted.split(".")
    target = cfg
    for p in parts[:-1]:
        if not hasattr(target, p):
            raise ConfigError(f"override {dotted}: unknown section {p!r}")
        target = getattr(target, p)
    if not hasattr(target, parts[-1]) or is_dataclass(getattr(target, parts[-1])):
        raise ConfigError(f"override {dotted}: unknown key")
    setattr(target, parts[-1], yaml.safe_load(raw))
