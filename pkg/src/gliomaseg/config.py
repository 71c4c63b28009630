"""JSON run configuration shared by every CLI command.

See ``docs/config.md`` for the key reference; :func:`default_config` returns
the full-scale defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data.preprocess import DEFAULT_EXCLUSIONS, IMAGE_SIZE, MODALITIES, SLICE_COUNT, SLICE_START
from .explain import GradCamConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    root: str = "data"
    modalities: list[str] = field(default_factory=lambda: list(MODALITIES))
    slice_start: int = SLICE_START
    slice_count: int = SLICE_COUNT
    image_size: int = IMAGE_SIZE
    split_ratios: list[float] = field(default_factory=lambda: [0.70, 0.15, 0.15])
    split_seed: int = 0
    exclusions: list[str] = field(default_factory=lambda: list(DEFAULT_EXCLUSIONS))


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gradcam: GradCamConfig = field(default_factory=GradCamConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "runs/default"

    def validate(self) -> None:
        mods = self.data.modalities
        if not mods or len(set(mods)) != len(mods) or not set(mods) <= set(MODALITIES):
            raise ConfigError(f"data.modalities must be a non-empty subset of {list(MODALITIES)}, got {mods}")
        if self.model.in_channels != len(mods):
            raise ConfigError(f"model.in_channels={self.model.in_channels} but {len(mods)} modalities are configured")
        if self.data.image_size % (2 ** self.model.depth):
            raise ConfigError(f"data.image_size {self.data.image_size} not divisible by 2^{self.model.depth}")
        if len(self.data.split_ratios) != 3 or abs(sum(self.data.split_ratios) - 1) > 1e-9:
            raise ConfigError("data.split_ratios must be three values summing to 1")
        if self.data.slice_start < 0 or self.data.slice_count < 1:
            raise ConfigError("data.slice_start must be >= 0 and data.slice_count >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


def _build(cls, values: dict, section: str):
    if not isinstance(values, dict):
        raise ConfigError(f"section {section!r} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = set(values) - known
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(sorted(unknown))}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section} settings: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a JSON object")
    sections = {"model": ModelConfig, "train": TrainConfig, "gradcam": GradCamConfig, "data": DataConfig}
    unknown = set(raw) - set(sections) - {"output_dir"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(sorted(unknown))}")
    parts = {name: _build(cls, raw.get(name, {}), name) for name, cls in sections.items()}
    cfg = RunConfig(**parts, output_dir=str(raw.get("output_dir", RunConfig.output_dir)))
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(raw)


def dump_config(config: RunConfig, path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def default_config() -> RunConfig:
    return RunConfig()
