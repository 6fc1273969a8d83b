"""Experiment configuration: one YAML file per run, loaded into dataclasses."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import yaml

from . import __version__
from .augment import AugmentPolicy
from .classifier import HeadConfig
from .detector import DetectorConfig
from .errors import ConfigError, ValidationError
from .training import TrainConfig


@dataclass
class DataConfig:
    images: str | None = None
    videos: str | None = None
    detection: str | None = None
    image_split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    video_split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    detection_split: tuple[float, float, float] = (0.7, 0.15, 0.15)
    num_frames: int = 8
    frame_size: tuple[int, int] = (32, 32)


@dataclass
class BackboneConfig:
    architecture: str = "small-conv"
    pretrained: str | None = None
    frozen_prefix: list[str] = field(default_factory=list)
    arch_kwargs: dict = field(default_factory=dict)


@dataclass
class DetectorSection:
    input_size: int = 640
    strides: tuple[int, ...] = (8, 16, 32)
    confidence_threshold: float = 0.25
    nms_iou_threshold: float = 0.45
    width: int = 32

    def detector_config(self) -> DetectorConfig:
        return DetectorConfig(self.input_size, self.strides, self.confidence_threshold, self.nms_iou_threshold)


@dataclass
class EvaluateConfig:
    iou_threshold: float = 0.5
    ap_interpolation: str = "all-point"
    decision_threshold: float = 0.5
    workers: int = 1
    annotate: bool = True


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    output_dir: str = "runs/experiment"
    data: DataConfig = field(default_factory=DataConfig)
    augment: dict = field(default_factory=lambda: AugmentPolicy().to_dict())
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: dict = field(default_factory=lambda: HeadConfig().to_dict())
    detector: DetectorSection = field(default_factory=DetectorSection)
    train: dict = field(default_factory=dict)  # backbone / classifier / detector -> TrainConfig fields
    evaluate: EvaluateConfig = field(default_factory=EvaluateConfig)
    sweep: dict = field(default_factory=lambda: {
        "backbones": ["vgg11", "resnet18", "mobilenet_v3_small"],
        "heads": ["lstm", "gru", "transformer"],
    })

    # ---------------------------------------------------------------- views

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(**self.augment)

    def head_config(self) -> HeadConfig:
        return HeadConfig(**self.head)

    def train_config(self, stage: str) -> TrainConfig:
        section = dict(self.train.get(stage, {}))
        section.setdefault("seed", self.seed)
        try:
            return TrainConfig(**section)
        except TypeError as exc:
            raise ConfigError(f"train.{stage}: {exc}") from exc

    def seeds(self) -> dict:
        return {"global": self.seed,
                **{stage: self.train_config(stage).seed for stage in ("backbone", "classifier", "detector")}}

    def to_dict(self) -> dict:
        return json.loads(json.dumps(asdict(self)))

    def config_hash(self) -> str:
        """Hash of every setting except where outputs are written."""
        values = {k: v for k, v in self.to_dict().items() if k != "output_dir"}
        canonical = json.dumps(values, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()[:16]

    def provenance(self) -> dict:
        return {"config_hash": self.config_hash(), "seeds": self.seeds(), "version": __version__}

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def validate(self) -> "ExperimentConfig":
        """Check every section parses; raises ConfigError/ValidationError."""
        self.augment_policy()
        self.head_config()
        self.detector.detector_config()
        for stage in ("backbone", "classifier", "detector"):
            self.train_config(stage)
        if self.data.num_frames < 1:
            raise ValidationError("data.num_frames must be >= 1")
        return self

    def require_paths(self, *names: str) -> None:
        for name in names:
            value = getattr(self.data, name)
            if value is None:
                raise ConfigError(f"data.{name} is not set")
            if not Path(value).exists():
                raise ConfigError(f"data.{name} path {value} does not exist")


_SECTIONS = {"data": DataConfig, "backbone": BackboneConfig, "detector": DetectorSection,
             "evaluate": EvaluateConfig}


def _build(cls, values: dict, where: str):
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")
    out = {}
    for f in fields(cls):
        if f.name not in values:
            continue
        v = values[f.name]
        if f.name in _SECTIONS and cls is ExperimentConfig:
            v = _build(_SECTIONS[f.name], v or {}, f.name)
        elif isinstance(v, list) and "tuple" in str(f.type):
            v = tuple(v)
        out[f.name] = v
    return cls(**out)


def config_from_dict(values: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, values or {}, "config")
    base_augment = AugmentPolicy().to_dict()
    base_augment.update(cfg.augment)
    cfg.augment = base_augment
    base_head = HeadConfig().to_dict()
    base_head.update(cfg.head)
    cfg.head = base_head
    return cfg


def load_config(path, seed: int | None = None, out: str | None = None) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        values = yaml.safe_load(path.read_text()) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(values, dict):
        raise ConfigError(f"{path} must contain a mapping")
    cfg = config_from_dict(values)
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    if out is not None:
        cfg = replace(cfg, output_dir=str(out))
    return cfg.validate()


def dump_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=True))
