"""Experiment configuration: schema, validation, and stable hashing.

A single YAML (or JSON) file drives a whole experiment. Parsing is strict:
unknown keys are rejected with the offending path. The config hash is the
SHA-256 of the canonical JSON form with all defaults materialized, so two
semantically identical files hash equally and any field change re-hashes.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .errors import ConfigError

DEFAULT_LAMBDA_GRID = (0.0018, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483, 0.0932, 0.1800)


@dataclass
class TrainConfig:
    batch_size: int = 8
    patch_size: int = 64
    learning_rate: float = 1e-4
    trigger_learning_rate: float | None = None  # None: same as learning_rate
    epochs: int = 30
    steps: int = 2000
    plateau_patience: int = 5
    seed: int = 0
    optimizer: str = "adam"
    lambda_grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    grad_clip: float = 1.0
    val_fraction: float = 0.1
    # attack-phase trigger handling: seed the general trigger along the
    # codec's rate-sensitive directions, and keep its MSE from collapsing
    # below floor * epsilon^2 (0 disables the floor)
    trigger_init: str = "rate-aligned"  # or "random"
    trigger_budget_floor: float = 0.5

    def __post_init__(self):
        for name in ("batch_size", "patch_size", "epochs", "plateau_patience"):
            if getattr(self, name) < 0:
                raise ConfigError(f"train.{name} must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate must be positive")
        if self.optimizer != "adam":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if not 0 < self.val_fraction < 1:
            raise ConfigError("train.val_fraction must lie in (0, 1)")
        if self.trigger_init not in ("rate-aligned", "random"):
            raise ConfigError(f"unknown trigger_init {self.trigger_init!r}")
        if not 0 <= self.trigger_budget_floor < 1:
            raise ConfigError("trigger_budget_floor must lie in [0, 1)")


@dataclass
class CodecConfig:
    quality: int = 3
    base: int = 64
    latent_channels: int = 128
    hyper_channels: int = 64

    def __post_init__(self):
        if not 1 <= self.quality <= 8:
            raise ConfigError("codec.quality must be in [1, 8]")


@dataclass
class TriggerConfig:
    block_size: int = 16
    band_size: int = 64
    top_k: int = 16
    epsilon: float = 0.005
    style: str = "frequency"  # or "baseline"

    def __post_init__(self):
        if self.style not in ("frequency", "baseline"):
            raise ConfigError(f"unknown trigger style {self.style!r}")
        if not 0 < self.top_k <= self.band_size:
            raise ConfigError("trigger needs 0 < top_k <= band_size")
        if self.band_size > self.block_size ** 2 - 1:
            raise ConfigError("trigger band exceeds block capacity")
        if self.epsilon <= 0:
            raise ConfigError("trigger.epsilon must be positive")


@dataclass
class DatasetConfig:
    # Either a directory of PNGs or a synthetic corpus spec.
    path: str | None = None
    synth: str | None = None  # natural-noise | shapes | faces-toy
    n: int = 500
    size: int = 64

    def __post_init__(self):
        if (self.path is None) == (self.synth is None):
            raise ConfigError("dataset needs exactly one of 'path' or 'synth'")
        if self.synth is not None and self.synth not in (
            "natural-noise", "shapes", "faces-toy"):
            raise ConfigError(f"unknown synth corpus {self.synth!r}")


@dataclass
class ObjectiveConfig:
    kind: str = "bpp"  # bpp | psnr | seg_targeted | face_deid
    alpha: float | None = None
    beta: float | None = None
    gamma: float = 1e4
    epsilon: float = 0.005
    variant: str = "dynamic"
    weight: float = 1.0
    aux_dataset: str | None = None  # key into ExperimentConfig.aux_datasets
    source_class: int | None = None
    target_class: int | None = None

    def __post_init__(self):
        if self.kind not in ("bpp", "psnr", "seg_targeted", "face_deid"):
            raise ConfigError(f"unknown objective kind {self.kind!r}")
        if self.variant not in ("static", "dynamic"):
            raise ConfigError(f"unknown loss variant {self.variant!r}")
        if self.weight <= 0:
            raise ConfigError("objective.weight must be positive")

    def to_spec(self):
        from .losses import LossVariant, ObjectiveKind, default_objective

        overrides = {"aux_dataset": self.aux_dataset}
        if self.alpha is not None:
            overrides["alpha"] = self.alpha
        if self.beta is not None:
            overrides["beta"] = self.beta
        overrides["gamma"] = self.gamma
        overrides["epsilon"] = self.epsilon
        if self.kind == "seg_targeted":
            overrides["source_class"] = 1 if self.source_class is None else self.source_class
            overrides["target_class"] = 0 if self.target_class is None else self.target_class
        return default_objective(
            ObjectiveKind(self.kind), LossVariant(self.variant), **overrides)


@dataclass
class DefenseConfig:
    blur_sigmas: tuple[float, ...] = (0.2, 0.3, 0.5, 0.6)
    squeeze_depths: tuple[int, ...] = (7, 4, 3)
    amplify_factor: float = 3.0


@dataclass
class ExperimentConfig:
    seed: int = 0
    output_dir: str = "runs"
    main_dataset: DatasetConfig = field(default_factory=lambda: DatasetConfig(synth="natural-noise"))
    aux_datasets: dict = field(default_factory=dict)  # id -> DatasetConfig
    codec: CodecConfig = field(default_factory=CodecConfig)
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    objectives: tuple[ObjectiveConfig, ...] = (ObjectiveConfig(),)
    train: TrainConfig = field(default_factory=TrainConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)

    def __post_init__(self):
        for obj in self.objectives:
            if obj.aux_dataset is not None and obj.aux_dataset not in self.aux_datasets:
                raise ConfigError(
                    f"objective {obj.kind} references unknown aux dataset "
                    f"{obj.aux_dataset!r}")


_NESTED = {
    "main_dataset": DatasetConfig,
    "codec": CodecConfig,
    "trigger": TriggerConfig,
    "train": TrainConfig,
    "defense": DefenseConfig,
}


def _build(cls, data, path):
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a mapping, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{path}: unknown key(s) {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else key
        if key == "objectives":
            if not isinstance(value, list):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[key] = tuple(_build(ObjectiveConfig, o, f"{sub}[{i}]")
                                for i, o in enumerate(value))
        elif key == "aux_datasets":
            if not isinstance(value, dict):
                raise ConfigError(f"{sub}: expected a mapping of dataset ids")
            kwargs[key] = {
                name: _build(DatasetConfig, ds, f"{sub}.{name}")
                for name, ds in value.items()
            }
        elif key in _NESTED and value is not None:
            kwargs[key] = _build(_NESTED[key], value, sub)
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def config_from_dict(data: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, data, "")


def load_config(path: str | Path) -> ExperimentConfig:
    text = Path(path).read_text()
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if data is None:
        data = {}
    return config_from_dict(data)


def canonical_dict(cfg) -> dict:
    """Dataclass tree -> plain dict with every default materialized."""
    if dataclasses.is_dataclass(cfg):
        return {f.name: canonical_dict(getattr(cfg, f.name))
                for f in dataclasses.fields(cfg)}
    if isinstance(cfg, dict):
        return {k: canonical_dict(cfg[k]) for k in sorted(cfg)}
    if isinstance(cfg, (list, tuple)):
        return [canonical_dict(v) for v in cfg]
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    blob = json.dumps(canonical_dict(cfg), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
