"""Pipeline configuration: nested JSON sections mapped onto the module dataclasses."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .augment import AugmentConfig
from .inference import InferenceConfig
from .mining import MiningConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetSection:
    annotation_file: str | None = None
    image_dir: str | None = None
    patch_size: int = 240
    random_negatives_per_unlabeled: int = 20
    random_negatives_per_labeled: int = 0
    min_distance: float = 120.0
    use_imposters: bool = True

    def validate(self):
        if self.patch_size < 1:
            raise ValueError("patch_size must be >= 1")
        if self.random_negatives_per_unlabeled < 0 or self.random_negatives_per_labeled < 0:
            raise ValueError("random_negatives_per_unlabeled/random_negatives_per_labeled must be >= 0")
        if self.min_distance < 0:
            raise ValueError("min_distance must be >= 0")


@dataclass
class SplitSection:
    val_fraction: float = 0.1
    seed: int = 0

    def validate(self):
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")


@dataclass
class ModelSection:
    arch: str = "tiny_cnn"
    num_ranks: int = 2
    input_size: int = 240
    channels: tuple[int, int, int, int] = (12, 24, 32, 32)
    coords: bool = True
    seed: int = 0

    def validate(self):
        if self.arch not in ("tiny_cnn", "efficientnet_b3"):
            raise ValueError("arch must be 'tiny_cnn' or 'efficientnet_b3'")
        if self.num_ranks < 2:
            raise ValueError("num_ranks must be >= 2")
        if self.input_size < 32:
            raise ValueError("input_size must be >= 32")


@dataclass
class EvaluationSection:
    radius: float = 30.0

    def validate(self):
        if self.radius <= 0:
            raise ValueError("radius must be > 0")


@dataclass
class PipelineConfig:
    dataset: DatasetSection = field(default_factory=DatasetSection)
    split: SplitSection = field(default_factory=SplitSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceConfig = field(default_factory=InferenceConfig)
    cam_threshold: float = 0.5
    mining: MiningConfig = field(default_factory=MiningConfig)
    evaluation: EvaluationSection = field(default_factory=EvaluationSection)

    def validate(self):
        if not 0.0 < self.cam_threshold <= 1.0:
            raise ValueError("cam_threshold must lie in (0, 1]")
        if self.inference.window != self.dataset.patch_size:
            raise ValueError("inference.window must equal dataset.patch_size")


def _coerce(value: Any, default: Any, path: str) -> Any:
    if default is None or value is None:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)) or len(value) != len(default):
            raise ConfigError(f"{path}: expected a list of {len(default)} values, got {value!r}")
        return tuple(_coerce(v, d, f"{path}[{i}]") for i, (v, d) in enumerate(zip(value, default)))
    return value


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected an object")
    defaults = cls()
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown key {_join(path, unknown[0])}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        default = getattr(defaults, f.name)
        sub = _join(path, f.name)
        if dataclasses.is_dataclass(default):
            kwargs[f.name] = _build(type(default), data[f.name], sub)
        else:
            kwargs[f.name] = _coerce(data[f.name], default, sub)
    obj = cls(**kwargs)
    try:
        obj.validate()
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path}.{exc}" if path else str(exc)) from exc
    return obj


def _join(path, name):
    return f"{path}.{name}" if path else name


def config_from_dict(data: dict) -> PipelineConfig:
    return _build(PipelineConfig, data, "")


def config_to_dict(config: PipelineConfig) -> dict:
    def convert(v):
        if isinstance(v, dict):
            return {k: convert(x) for k, x in v.items()}
        if isinstance(v, (list, tuple)):
            return [convert(x) for x in v]
        return v
    return convert(dataclasses.asdict(config))


def parse_config(path: str | Path) -> PipelineConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
    return config_from_dict(data)


def dump_config(config: PipelineConfig) -> str:
    return json.dumps(config_to_dict(config), indent=1, sort_keys=True)
