"""Experiment configuration: nested dataclasses <-> JSON with dotted overrides."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from selfnerf.errors import ConfigError
from selfnerf.grid_encoding import FrequencyConfig, HashGridConfig, VertexBankConfig
from selfnerf.radiance_field import FieldConfig
from selfnerf.volume_renderer import RenderConfig

ENCODERS = ("hash", "vertex", "frequency")


@dataclass(frozen=True)
class GridSettings:
    levels: int = 16
    features: int = 2
    table_size: int = 2**15
    min_res: int = 16
    max_res: int | None = None  # None: training image resolution, capped at 512

    def resolve(self, image_size: int) -> HashGridConfig:
        max_res = self.max_res if self.max_res is not None else min(int(image_size), 512)
        max_res = max(max_res, self.min_res + (1 if self.levels > 1 else 0))
        if self.levels == 1:
            max_res = self.min_res
        return HashGridConfig(self.levels, self.features, self.table_size, self.min_res, max_res)


@dataclass(frozen=True)
class ModelConfig:
    encoder: str = "hash"
    k: int = 4
    d_max: float | None = None  # None: derived from the surface boxes
    grid: GridSettings = GridSettings()
    field: FieldConfig = FieldConfig()
    vertex_bins: int | None = None  # None: same as the finest grid resolution
    vertex_features: int | None = None  # None: same width as the hash feature
    frequency_bands: int = 6

    def __post_init__(self):
        if self.encoder not in ENCODERS:
            raise ConfigError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        if self.k < 1:
            raise ConfigError("k must be positive")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    rays_per_batch: int = 4096
    lambda_mask: float = 1.0
    lambda_dist: float = 1e-3
    beta: float = 10.0
    lambda_switch: int = 400
    lambda_early: float = 1.0
    lambda_late: float = 0.1
    lr_start: float = 2e-3
    lr_end: float = 2e-5
    adam_beta1: float = 0.9
    adam_beta2: float = 0.99
    adam_eps: float = 1e-15
    seed: int = 0
    in_mask_fraction: float = 0.5
    checkpoint_every: int = 500
    dist_exp_clamp: float = 20.0
    dist_inside_free: bool = False

    def __post_init__(self):
        if self.iterations < 0 or self.rays_per_batch < 1:
            raise ConfigError("iterations must be >= 0 and rays_per_batch >= 1")
        if not self.lr_start >= self.lr_end > 0.0:
            raise ConfigError("need lr_start >= lr_end > 0")
        if self.lambda_switch < 0:
            raise ConfigError("lambda_switch must be non-negative")
        if self.beta < 0.0:
            raise ConfigError("beta must be non-negative")
        if not 0.0 <= self.in_mask_fraction <= 1.0:
            raise ConfigError("in_mask_fraction must be in [0, 1]")


@dataclass(frozen=True)
class ExperimentConfig:
    data: str = ""
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    render: RenderConfig = RenderConfig()


def to_dict(cfg) -> dict:
    return dataclasses.asdict(cfg)


def _build(cls, values: dict):
    if not isinstance(values, dict):
        raise ConfigError(f"expected a mapping for {cls.__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in values.items():
        if key not in fields:
            raise ConfigError(f"unknown setting {cls.__name__}.{key}")
        default = getattr(cls(), key) if _has_defaults(cls) else None
        if dataclasses.is_dataclass(default):
            value = _build(type(default), value)
        elif isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def _has_defaults(cls) -> bool:
    return all(
        f.default is not dataclasses.MISSING or f.default_factory is not dataclasses.MISSING
        for f in dataclasses.fields(cls)
    )


def from_dict(values: dict) -> ExperimentConfig:
    return _build(ExperimentConfig, values)


def load_config(path) -> ExperimentConfig:
    try:
        values = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(values)


def save_config(cfg: ExperimentConfig, path):
    Path(path).write_text(json.dumps(to_dict(cfg), indent=2, sort_keys=True) + "\n")


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values parse as JSON, else as strings."""
    values = to_dict(cfg)
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override must look like key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = values
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if part not in node or not isinstance(node[part], dict):
                raise ConfigError(f"unknown setting {key}")
            node = node[part]
        if parts[-1] not in node:
            raise ConfigError(f"unknown setting {key}")
        node[parts[-1]] = value
    return from_dict(values)


def vertex_bank_config(model: ModelConfig, grid: HashGridConfig, n_vertices: int) -> VertexBankConfig:
    bins = model.vertex_bins if model.vertex_bins is not None else grid.max_res
    feats = model.vertex_features if model.vertex_features is not None else grid.output_dim
    return VertexBankConfig(n_vertices, bins, feats)


def frequency_config(model: ModelConfig) -> FrequencyConfig:
    return FrequencyConfig(model.frequency_bands)
