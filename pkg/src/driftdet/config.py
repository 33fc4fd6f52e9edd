"""Experiment configuration file: one YAML document covering every stage.

Unknown keys are rejected so a typo cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .augment import StrongAugConfig, WeakAugConfig
from .data import SceneSpec
from .errors import ConfigError
from .model import ArchConfig
from .training import TrainConfig

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class DataConfig:
    n_source: int = 200
    n_target: int = 200
    n_test: int = 100
    third_shift: str | None = None
    third_severity: float | None = None

    def __post_init__(self):
        if min(self.n_source, self.n_target, self.n_test) < 1:
            raise ConfigError("split sizes must be >= 1")


@dataclass(frozen=True)
class ExperimentConfig:
    scene: SceneSpec = field(default_factory=SceneSpec)
    data: DataConfig = field(default_factory=DataConfig)
    weak_aug: WeakAugConfig = field(default_factory=WeakAugConfig)
    strong_aug: StrongAugConfig = field(default_factory=StrongAugConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    arch: ArchConfig = field(default_factory=ArchConfig)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return dataclasses.replace(
            self,
            scene=dataclasses.replace(self.scene, seed=seed),
            train=dataclasses.replace(self.train, seed=seed))


_SECTIONS = {
    "scene": SceneSpec,
    "data": DataConfig,
    "weak_aug": WeakAugConfig,
    "strong_aug": StrongAugConfig,
    "train": TrainConfig,
    "arch": ArchConfig,
}


def _build_section(cls, raw: dict, section: str):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(raw) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
    coerced = {}
    for key, value in raw.items():
        if fields[key].type in ("tuple[int, ...]", "tuple[float, ...]") \
                and isinstance(value, list):
            value = tuple(value)
        coerced[key] = value
    return cls(**coerced)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    version = raw.get("schema_version")
    if version != SCHEMA_VERSION:
        raise ConfigError(f"schema_version must be {SCHEMA_VERSION}, got {version!r}")
    unknown = set(raw) - set(_SECTIONS) - {"schema_version"}
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {sorted(unknown)}")
    kwargs = {}
    for section, cls in _SECTIONS.items():
        body = raw.get(section, {}) or {}
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a mapping")
        kwargs[section] = _build_section(cls, body, section)
    return ExperimentConfig(**kwargs)


def load_config(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    return parse_config(raw)


def dump_config(config: ExperimentConfig) -> str:
    doc: dict = {"schema_version": SCHEMA_VERSION}
    for section in _SECTIONS:
        body = dataclasses.asdict(getattr(config, section))
        doc[section] = {k: (list(v) if isinstance(v, tuple) else v)
                        for k, v in body.items()}
    return yaml.safe_dump(doc, sort_keys=False)


def save_config(config: ExperimentConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(config))
