"""Flat ``key=value`` run configuration shared by the command-line tools."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path

from .acceptance import AcceptanceConfig, AcceptanceTrainConfig
from .classifier import DIR_INIT_MODES, ClassifierConfig, TrainConfig
from .ellipse import HoughConfig, MeasureConfig
from .errors import ConfigError
from .imageio import read_keyvalue, write_keyvalue
from .nn import AdamConfig
from .patches import SamplingConfig

PRESETS = ("compact", "full")


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # phantom data
    n_true: int = 60
    n_false: int = 0
    train_fraction: float = 2.0 / 3.0
    # classifier
    preset: str = "compact"
    dir_init: str = "uniform_toward_range"
    cap_per_class: int = 100
    iterations: int = 2000
    batch_size: int = 64
    eval_every: int = 100
    eval_max: int = 2000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    segment_batch: int = 1024
    # ellipse fitting
    hough_candidates: int = 25
    hough_max_pairs: int = 4000
    hough_seed: int = 0
    min_ratio: float = 0.6
    overlap_cap: float = 0.2
    min_component: int = 20
    adjust: float = 0.9
    # acceptance
    acceptance_iterations: int = 1500
    acceptance_augment: bool = True
    threshold: float = -1.0  # negative: use the threshold stored with the weights

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError(f"preset must be one of {PRESETS}")
        if self.dir_init not in DIR_INIT_MODES:
            raise ConfigError(f"dir_init must be one of {DIR_INIT_MODES}")
        if not 0.0 <= self.train_fraction <= 1.0:
            raise ConfigError("train_fraction must lie in [0, 1]")
        for name in ("iterations", "acceptance_iterations", "n_true", "n_false"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        for name in ("batch_size", "eval_every", "segment_batch", "cap_per_class"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")

    # --- parsing -----------------------------------------------------------
    @classmethod
    def keys(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    @classmethod
    def _convert(cls, key: str, raw: str):
        types = {f.name: f.type for f in fields(cls)}
        if key not in types:
            raise ConfigError(f"unknown configuration key {key!r}")
        t = types[key]
        try:
            if t == "bool":
                if raw.lower() in ("1", "true", "yes"):
                    return True
                if raw.lower() in ("0", "false", "no"):
                    return False
                raise ValueError(raw)
            if t == "int":
                return int(raw)
            if t == "float":
                return float(raw)
        except ValueError:
            raise ConfigError(f"bad value for {key}: {raw!r}") from None
        return raw

    def with_overrides(self, values: dict[str, str]) -> "RunConfig":
        parsed = {k: self._convert(k, str(v)) for k, v in values.items()}
        return dataclasses.replace(self, **parsed)

    @classmethod
    def load(cls, path=None, overrides: dict[str, str] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            cfg = cfg.with_overrides(read_keyvalue(path))
        return cfg.with_overrides(overrides or {})

    def save(self, path) -> None:
        write_keyvalue(Path(path), self.to_dict())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    # --- component configs -------------------------------------------------
    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.epsilon)

    def classifier(self) -> ClassifierConfig:
        return ClassifierConfig.compact() if self.preset == "compact" else ClassifierConfig()

    def sampling(self, train_fraction: float, seed: int) -> SamplingConfig:
        return SamplingConfig(self.classifier().view_size, self.cap_per_class, train_fraction, seed)

    def training(self) -> TrainConfig:
        return TrainConfig(self.iterations, self.batch_size, self.eval_every, self.eval_max, self.seed, self.adam())

    def measure(self) -> MeasureConfig:
        hough = HoughConfig(n_candidates=self.hough_candidates, max_pairs=self.hough_max_pairs, seed=self.hough_seed)
        return MeasureConfig(hough=hough, min_ratio=self.min_ratio, overlap_cap=self.overlap_cap,
                             min_component=self.min_component, adjust=self.adjust)

    def acceptance(self) -> AcceptanceConfig:
        return AcceptanceConfig.compact() if self.preset == "compact" else AcceptanceConfig()

    def acceptance_training(self) -> AcceptanceTrainConfig:
        return AcceptanceTrainConfig(self.acceptance_iterations, self.batch_size, self.seed, self.adam(),
                                     self.acceptance_augment)
