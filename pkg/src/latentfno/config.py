"""Run configuration: one JSON document holding every module's settings.

Every section is validated before any work starts and unknown keys are
rejected.  Missing sections and keys take their defaults.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .dataset import AmplitudeSampler
from .embedding import EmbeddingConfig
from .errors import ConfigError
from .fno import FnoConfig
from .oracle import DEFAULT_JITTER, OracleConfig, PointNeuronParams
from .training import TrainConfig


def _build(cls, section: str, d: dict | None, **extra):
    d = dict(d or {})
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"{section}: unknown key(s) {sorted(unknown)}")
    d.update(extra)
    try:
        return cls(**d)
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from exc


@dataclass(frozen=True)
class EnsembleSection:
    count: int = 8
    held_out: int = 2
    jitter: dict = field(default_factory=lambda: dict(DEFAULT_JITTER))
    seed: int = 79
    max_retries: int = 20

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("count must be >= 1")
        if not 0 <= self.held_out < self.count:
            raise ConfigError("held_out must be in [0, count)")


@dataclass(frozen=True)
class DataSection:
    n_samples: int = 2000
    subsample_factor: int = 3
    split: tuple = (0.8, 0.1, 0.1)

    def __post_init__(self):
        object.__setattr__(self, "split", tuple(float(x) for x in self.split))
        if self.n_samples < 1:
            raise ConfigError("n_samples must be >= 1")
        if self.subsample_factor < 1:
            raise ConfigError("subsample_factor must be >= 1")
        if len(self.split) != 3 or abs(sum(self.split) - 1) > 1e-9 or min(self.split) < 0:
            raise ConfigError("split must be three non-negative fractions summing to 1")


@dataclass(frozen=True)
class FnoSection:
    n_layers: int = 4
    hidden: int = 16
    modes: int = 64
    projection: int = 32
    activation: str = "gelu"


@dataclass(frozen=True)
class FinetuneSection:
    feature: str = "sag_amplitude"
    lam: float = 25.0
    lr: float = 2e-4
    epochs: int = 30
    plateau_patience: int = 3
    max_amplitude: float = 0.0   # restrict to amplitudes strictly below this (nA)


@dataclass(frozen=True)
class LatentSection:
    radius: float = 0.15
    n_neighbors: int = 50
    n_hull: int = 200
    grid_resolution: int = 8

    def __post_init__(self):
        if not self.radius > 0:
            raise ConfigError("radius must be positive")
        if min(self.n_neighbors, self.n_hull) < 1 or self.grid_resolution < 2:
            raise ConfigError("sample counts must be >= 1 and grid_resolution >= 2")


@dataclass(frozen=True)
class BenchmarkSection:
    n: int = 16
    batch_sizes: tuple = (1, 16)
    subsample_factor: int = 1

    def __post_init__(self):
        object.__setattr__(self, "batch_sizes", tuple(int(b) for b in self.batch_sizes))
        if self.n < 1 or not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ConfigError("benchmark n and batch sizes must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    threads: int = 1
    neuron: PointNeuronParams = field(default_factory=PointNeuronParams)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    ensemble: EnsembleSection = field(default_factory=EnsembleSection)
    sampler: AmplitudeSampler = field(default_factory=AmplitudeSampler)
    data: DataSection = field(default_factory=DataSection)
    embedding: EmbeddingConfig = field(default_factory=EmbeddingConfig)
    fno: FnoSection = field(default_factory=FnoSection)
    training: TrainConfig = field(default_factory=TrainConfig)
    finetune: FinetuneSection = field(default_factory=FinetuneSection)
    latent: LatentSection = field(default_factory=LatentSection)
    benchmark: BenchmarkSection = field(default_factory=BenchmarkSection)

    def fno_config(self) -> FnoConfig:
        return _build(FnoConfig, "fno", asdict(self.fno), in_channels=self.embedding.n_channels)

    def finetune_train_config(self) -> TrainConfig:
        base = asdict(self.training)
        base.update(lr=self.finetune.lr, epochs=self.finetune.epochs,
                    plateau_patience=self.finetune.plateau_patience)
        return TrainConfig(**base)

    def to_dict(self) -> dict:
        def plain(v):
            if isinstance(v, tuple):
                return [plain(x) for x in v]
            if isinstance(v, dict):
                return {k: plain(x) for k, x in v.items()}
            return v
        return plain(asdict(self))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_SECTIONS = {
    "neuron": PointNeuronParams, "oracle": OracleConfig, "ensemble": EnsembleSection,
    "sampler": AmplitudeSampler, "data": DataSection, "embedding": EmbeddingConfig,
    "fno": FnoSection, "training": TrainConfig, "finetune": FinetuneSection,
    "latent": LatentSection, "benchmark": BenchmarkSection,
}


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(d) - set(_SECTIONS) - {"seed", "threads"}
    if unknown:
        raise ConfigError(f"unknown config section(s) {sorted(unknown)}")
    kw = {}
    for name, cls in _SECTIONS.items():
        sec = d.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigError(f"{name}: section must be an object")
        if cls is PointNeuronParams:
            try:
                kw[name] = PointNeuronParams.from_dict(sec)
            except ValueError as exc:
                raise ConfigError(f"neuron: {exc}") from exc
        else:
            kw[name] = _build(cls, name, sec)
    for key in ("seed", "threads"):
        if key in d:
            if not isinstance(d[key], int) or d[key] < (1 if key == "threads" else 0):
                raise ConfigError(f"{key} must be a {'positive' if key == 'threads' else 'non-negative'} integer")
            kw[key] = d[key]
    cfg = RunConfig(**kw)
    cfg.fno_config()
    if cfg.embedding.n_channels < 1:
        raise ConfigError("embedding produces no channels")
    return cfg


def load_config(path) -> RunConfig:
    text = Path(path).read_text(encoding="utf-8")
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return config_from_dict(d)
