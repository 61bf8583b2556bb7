"""Experiment configuration: nested dataclasses loaded from YAML/JSON."""
from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .. import binio
from ..defenses import DefenseConfig, DefenseError
from ..fedsim import ARCHITECTURES, FederationConfig
from ..unlearn import SCENARIOS, AFUConfig
from .datasets import DATASETS


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 4000
    n_test: int = 1000
    synthetic_n: int = 10000


@dataclass
class ModelConfig:
    arch: str = "convnet"
    widths: list[int] = field(default_factory=list)


@dataclass
class ScenarioConfig:
    kind: str = "sample-level"
    unlearned_clients: list[int] = field(default_factory=lambda: [0, 1])
    n_forget: int = 200
    target_class: int = 1


@dataclass
class UnlearnConfig:
    """``ascent_lr`` and ``finetune_lr`` default to the federation's local rate."""

    method: str = "afu"
    ascent_lr: float | None = None
    radius: float = 5.0
    finetune_epochs: int = 2
    finetune_lr: float | None = None
    finetune_batch: int = 32
    efu_seed_offset: int = 1


@dataclass
class AttackConfig:
    nu: float = 0.95
    beta: float = 1.0
    aux_source: str = "in-distribution"
    aux_dataset: str | None = None
    aux_size: int = 2000
    reducer: str = "svd"
    center: bool = True
    svd_method: str = "auto"
    hash_dim: int | None = None
    hash_seed: int = 0
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 40
    seed: int = 1234
    seed_channels: int = 256
    seed_size: int = 4
    widths: list[int] = field(default_factory=lambda: [128, 64, 32])


@dataclass
class MetricConfig:
    data_range: float = 1.0
    perceptual: str = "auto"
    perceptual_seed: int = 0
    tau: float = 10.0
    grid_pairs: int = 32


@dataclass
class ExperimentConfig:
    dataset: str = "mnist"
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    federation: FederationConfig = field(default_factory=FederationConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    unlearn: UnlearnConfig = field(default_factory=UnlearnConfig)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    metrics: MetricConfig = field(default_factory=MetricConfig)
    seed: int = 1234
    output_dir: str = "run"

    def validate(self) -> "ExperimentConfig":
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}")
        if self.model.arch not in ARCHITECTURES:
            raise ConfigError(f"unknown architecture {self.model.arch!r}")
        if self.scenario.kind not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario.kind!r}")
        if self.unlearn.method not in ("afu", "efu"):
            raise ConfigError(f"unknown unlearning method {self.unlearn.method!r}")
        if self.attack.aux_source not in ("in-distribution", "out-of-distribution"):
            raise ConfigError(f"unknown aux source {self.attack.aux_source!r}")
        if self.attack.aux_dataset is not None and self.attack.aux_dataset not in DATASETS:
            raise ConfigError(f"unknown aux dataset {self.attack.aux_dataset!r}")
        if self.attack.reducer not in ("svd", "hash"):
            raise ConfigError(f"unknown reducer {self.attack.reducer!r}")
        if not 0.0 < self.attack.nu <= 1.0:
            raise ConfigError("attack.nu must be in (0, 1]")
        if self.attack.beta < 0:
            raise ConfigError("attack.beta must be non-negative")
        if self.metrics.tau <= 0:
            raise ConfigError("metrics.tau must be positive")
        bad = [c for c in self.scenario.unlearned_clients if not 0 <= c < self.federation.n_clients]
        if bad:
            raise ConfigError(f"unlearned clients {bad} out of range")
        return self

    def to_dict(self, include_output: bool = False) -> dict:
        d = dataclasses.asdict(self)
        if not include_output:
            d.pop("output_dir")
        return d

    @property
    def fingerprint(self) -> str:
        text = binio.canonical_json(self.to_dict())
        return hashlib.sha256(text.encode()).hexdigest()[:12]

    def short_fingerprint(self) -> dict:
        """The fields a reader needs to interpret a report row."""
        return {
            "run": self.fingerprint,
            "dataset": self.dataset,
            "scenario": self.scenario.kind,
            "unlearn": self.unlearn.method,
            "defense": self.defense.tag(),
            "beta": self.attack.beta,
            "nu": self.attack.nu,
            "reducer": self.attack.reducer,
        }


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "federation": FederationConfig,
    "scenario": ScenarioConfig,
    "unlearn": UnlearnConfig,
    "defense": DefenseConfig,
    "attack": AttackConfig,
    "metrics": MetricConfig,
}


def _build(cls, values: dict | None, where: str):
    values = dict(values or {})
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError, DefenseError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def config_from_dict(data: dict[str, Any]) -> ExperimentConfig:
    data = dict(data or {})
    kwargs = {}
    for name, cls in _SECTIONS.items():
        kwargs[name] = _build(cls, data.pop(name, None), name)
    top = {f.name for f in dataclasses.fields(ExperimentConfig)} - set(_SECTIONS)
    unknown = sorted(set(data) - top)
    if unknown:
        raise ConfigError(f"unknown top-level keys: {unknown}")
    return ExperimentConfig(**kwargs, **data).validate()


def load_config(path: str | Path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    return config_from_dict(data or {})


def reference_config() -> ExperimentConfig:
    """The published training setup (40 clients, 10% selection, 20 rounds,
    1000 forgotten samples, attack batch 256 / lr 1e-4 / seed 1234)."""
    return config_from_dict({
        "dataset": "cifar10",
        "data": {"n_train": 50000, "n_test": 5000},
        "federation": {"n_clients": 40, "selection_fraction": 0.1, "rounds": 20, "seed": 1234},
        "scenario": {"kind": "sample-level", "unlearned_clients": list(range(4)), "n_forget": 1000},
        "attack": {"aux_size": 5000, "lr": 1e-4, "batch_size": 256, "seed": 1234, "nu": 0.95, "beta": 1.0},
    })


def desk_config(**overrides) -> ExperimentConfig:
    """CPU-sized MNIST recipe used by the end-to-end checks."""
    base = {
        "dataset": "mnist",
        "data": {"n_train": 4000, "n_test": 1000},
        "federation": {"n_clients": 8, "selection_fraction": 0.2, "rounds": 5, "local_epochs": 2,
                       "lr": 0.05, "batch_size": 32, "seed": 1234},
        "scenario": {"kind": "sample-level", "unlearned_clients": [0, 1], "n_forget": 200},
        "unlearn": {"method": "afu"},
        "attack": {"nu": 0.95, "beta": 1.0, "aux_size": 2000, "lr": 1e-3, "batch_size": 256, "epochs": 40,
                   "seed": 1234, "seed_channels": 128, "widths": [64, 32, 16]},
        "metrics": {"perceptual": "auto"},
        "seed": 1234,
    }
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            base[key] = {**base[key], **value}
        else:
            base[key] = value
    return config_from_dict(base)
