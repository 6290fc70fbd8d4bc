"""Run configuration: JSON schema, strict parsing, and provenance helpers.

Configs are plain JSON. Every key must be declared in the schema below;
unknown keys raise ConfigError so typos never silently fall back to
defaults. The effective (defaults-merged) config is written alongside
every command output for provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .errors import ConfigError

STAGE_NAMES = ("segnet", "flow-pretrain", "dmnet", "joint")
ABLATIONS = ("none", "no-dds", "no-dgfl", "no-dgfc", "no-fcm")


@dataclass
class SynthSpec:
    """Parameters of the synthetic moving-shapes dataset."""

    seed: int = 7
    num_clips: int = 50
    frames_per_clip: int = 12
    height: int = 64
    width: int = 64
    num_classes: int = 4
    num_shapes: int = 3
    velocity_min: int = 1
    velocity_max: int = 3
    texture_noise: float = 0.08
    occluder_width: int = 10
    val_fraction: float = 0.2

    def validate(self) -> None:
        if self.frames_per_clip < 10:
            raise ConfigError("synth.frames_per_clip must be >= 10 (triplet sampling needs distance up to 9)")
        if self.num_clips < 1:
            raise ConfigError("synth.num_clips must be positive")
        if self.height % 64 or self.width % 64:
            raise ConfigError("synth.height and synth.width must be divisible by 64 (correction-net encoder stride)")
        if self.num_classes < 3 or self.num_classes > 64:
            raise ConfigError("synth.num_classes must be in [3, 64] (background, shapes, occluder)")
        if self.num_shapes < 1:
            raise ConfigError("synth.num_shapes must be positive")
        if not (0 <= self.velocity_min <= self.velocity_max):
            raise ConfigError("synth velocity range must satisfy 0 <= min <= max")
        if not (0.0 < self.val_fraction < 1.0):
            raise ConfigError("synth.val_fraction must be in (0, 1)")
        if self.occluder_width < 0 or self.occluder_width >= min(self.height, self.width):
            raise ConfigError("synth.occluder_width out of range")


@dataclass
class AugmentConfig:
    hflip: bool = False
    crop_size: Optional[int] = None

    def validate(self) -> None:
        if self.crop_size is not None and (self.crop_size < 64 or self.crop_size % 64):
            raise ConfigError("augment.crop_size must be a multiple of 64")


@dataclass
class DataConfig:
    root: str = "data/synth"
    mean: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    std: list[float] = field(default_factory=lambda: [0.5, 0.5, 0.5])
    ignore_index: int = 255
    synth: SynthSpec = field(default_factory=SynthSpec)
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def validate(self) -> None:
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ConfigError("data.mean and data.std must have 3 channels")
        if any(s <= 0 for s in self.std):
            raise ConfigError("data.std entries must be positive")
        self.synth.validate()
        self.augment.validate()


@dataclass
class NetworkConfig:
    """Widths of the four networks. Defaults are the documented desk-scale set."""

    feature_channels: int = 32
    segnet_base: int = 32
    flownet_base: int = 16
    dmnet_channels: int = 16
    cfnet_base: int = 16

    def validate(self) -> None:
        for name in ("feature_channels", "segnet_base", "flownet_base", "dmnet_channels", "cfnet_base"):
            if getattr(self, name) < 1:
                raise ConfigError(f"networks.{name} must be positive")


@dataclass
class StageConfig:
    """Schedule for one training stage: lr_high for the first block of epochs,
    lr_low (10x drop by default) for the second."""

    epochs_high: int = 3
    epochs_low: int = 3
    batch_size: int = 8
    lr_high: float = 1e-4
    lr_low: float = 1e-5
    steps_per_epoch: Optional[int] = None
    static_pair_fraction: float = 0.1
    debug_dumps: bool = False

    def validate(self, name: str) -> None:
        if self.epochs_high < 0 or self.epochs_low < 0 or self.epochs_high + self.epochs_low < 1:
            raise ConfigError(f"train.{name}: epoch counts must be non-negative and sum to >= 1")
        if self.batch_size < 1:
            raise ConfigError(f"train.{name}.batch_size must be positive")
        if self.lr_high <= 0 or self.lr_low <= 0:
            raise ConfigError(f"train.{name}: learning rates must be positive")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ConfigError(f"train.{name}.steps_per_epoch must be positive")
        if not (0.0 <= self.static_pair_fraction < 1.0):
            raise ConfigError(f"train.{name}.static_pair_fraction must be in [0, 1)")


@dataclass
class TrainingConfig:
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    segnet: StageConfig = field(default_factory=lambda: StageConfig(epochs_high=3, epochs_low=3, batch_size=8))
    flow_pretrain: StageConfig = field(default_factory=lambda: StageConfig(epochs_high=3, epochs_low=3, batch_size=8))
    dmnet: StageConfig = field(default_factory=lambda: StageConfig(epochs_high=2, epochs_low=2, batch_size=8, steps_per_epoch=60))
    joint: StageConfig = field(default_factory=lambda: StageConfig(epochs_high=2, epochs_low=2, batch_size=4, steps_per_epoch=80))

    def validate(self) -> None:
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ConfigError("train.adam_beta1/adam_beta2 must be in [0, 1)")
        self.segnet.validate("segnet")
        self.flow_pretrain.validate("flow_pretrain")
        self.dmnet.validate("dmnet")
        self.joint.validate("joint")
        if self.joint.batch_size < 2:
            raise ConfigError(
                "train.joint.batch_size must be >= 2 (the cue network normalizes "
                "over the batch at its stride-64 bottleneck)"
            )

    def stage(self, name: str) -> StageConfig:
        attr = name.replace("-", "_")
        if name not in STAGE_NAMES:
            raise ConfigError(f"unknown training stage {name!r}; expected one of {STAGE_NAMES}")
        return getattr(self, attr)


@dataclass
class EvalConfig:
    distance_min: int = 1
    distance_max: int = 9
    eval_frame: Optional[int] = None
    segnet_miou_gate: float = 0.80

    def validate(self) -> None:
        if not (1 <= self.distance_min <= self.distance_max):
            raise ConfigError("evaluation: need 1 <= distance_min <= distance_max")

    @property
    def distances(self) -> list[int]:
        return list(range(self.distance_min, self.distance_max + 1))


@dataclass
class RunConfig:
    seed: int = 7
    out_root: str = "runs/desk"
    interval: int = 5
    data: DataConfig = field(default_factory=DataConfig)
    networks: NetworkConfig = field(default_factory=NetworkConfig)
    train: TrainingConfig = field(default_factory=TrainingConfig)
    evaluation: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> None:
        if self.interval < 1:
            raise ConfigError("interval must be >= 1")
        self.data.validate()
        self.networks.validate()
        self.train.validate()
        self.evaluation.validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def network_hash(self) -> str:
        """Hash of everything that determines network construction.

        Stage checkpoints record this; later stages refuse to load
        checkpoints built from a different network configuration.
        """
        payload = {
            "networks": dataclasses.asdict(self.networks),
            "num_classes": self.data.synth.num_classes,
            "mean": self.data.mean,
            "std": self.data.std,
        }
        blob = json.dumps(payload, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _build(cls, value, path: str):
    """Recursively construct a dataclass from a plain dict, strictly."""
    if not isinstance(value, dict):
        raise ConfigError(f"{path or 'config'}: expected an object, got {type(value).__name__}")
    hints = typing.get_type_hints(cls)
    field_names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, raw in value.items():
        if key not in field_names:
            raise ConfigError(f"unknown config key {path + '.' if path else ''}{key}")
        kwargs[key] = _coerce(hints[key], raw, f"{path + '.' if path else ''}{key}")
    return cls(**kwargs)


def _coerce(hint, raw, path: str):
    origin = typing.get_origin(hint)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        if raw is None:
            return None
        return _coerce(args[0], raw, path)
    if dataclasses.is_dataclass(hint):
        return _build(hint, raw, path)
    if origin in (list, typing.List):
        if not isinstance(raw, list):
            raise ConfigError(f"{path}: expected a list")
        (elem,) = typing.get_args(hint)
        return [_coerce(elem, v, f"{path}[{i}]") for i, v in enumerate(raw)]
    if hint is bool:
        if not isinstance(raw, bool):
            raise ConfigError(f"{path}: expected a boolean")
        return raw
    if hint is int:
        if isinstance(raw, bool) or not isinstance(raw, int):
            raise ConfigError(f"{path}: expected an integer")
        return raw
    if hint is float:
        if isinstance(raw, bool) or not isinstance(raw, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(raw)
    if hint is str:
        if not isinstance(raw, str):
            raise ConfigError(f"{path}: expected a string")
        return raw
    raise ConfigError(f"{path}: unsupported config type {hint!r}")


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {p} is not valid JSON: {e}") from e
    return config_from_dict(data)


def write_effective_config(cfg: RunConfig, out_dir: str | Path) -> Path:
    """Write the defaults-merged config next to command outputs."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dest = out / "effective_config.json"
    dest.write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    return dest
