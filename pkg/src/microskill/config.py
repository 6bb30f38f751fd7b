"""Pipeline configuration tree, loaded from YAML with strict key checking."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import IO, Any, Optional

import yaml

from .classifier import BoostParams
from .fusion import FusionConfig
from .metrics import MatchConfig
from .simulator import NoiseConfig
from .tracker import TrackerConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TipConfig:
    prior_samples: int = 40
    prior_seed: int = 0

    def __post_init__(self):
        if self.prior_samples < 1:
            raise ValueError("prior_samples must be >= 1")


@dataclass(frozen=True)
class KinematicsConfig:
    smoothing_window: int = 5

    def __post_init__(self):
        if self.smoothing_window < 1 or self.smoothing_window % 2 == 0:
            raise ValueError("smoothing_window must be odd and >= 1")


@dataclass(frozen=True)
class FeatureConfig:
    fdr_q: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.fdr_q <= 1.0:
            raise ValueError("fdr_q must lie in [0, 1]")


@dataclass(frozen=True)
class ClassifierConfig:
    boost: BoostParams = BoostParams()
    folds: int = 5

    def __post_init__(self):
        if self.folds < 2:
            raise ValueError("folds must be >= 2")


@dataclass(frozen=True)
class SimulatorConfig:
    duration_s: float = 40.0
    frame_rate: float = 30.0
    archetype_spread: float = 0.25
    noise: NoiseConfig = NoiseConfig()


@dataclass(frozen=True)
class PipelineConfig:
    fusion: FusionConfig = FusionConfig()
    tracker: TrackerConfig = TrackerConfig()
    tip: TipConfig = TipConfig()
    kinematics: KinematicsConfig = KinematicsConfig()
    features: FeatureConfig = FeatureConfig()
    classifier: ClassifierConfig = ClassifierConfig()
    eval: MatchConfig = MatchConfig()
    simulator: SimulatorConfig = SimulatorConfig()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=list)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"unknown config key {path + '.' if path else ''}{key}")
    kwargs = {}
    for key, value in data.items():
        f = known[key]
        sub = f"{path}.{key}" if path else key
        default = getattr(cls(), key) if f.default is dataclasses.MISSING else f.default
        if dataclasses.is_dataclass(default):
            kwargs[key] = _build(type(default), value or {}, sub)
        elif isinstance(default, tuple):
            if not isinstance(value, (list, tuple)):
                raise ConfigError(f"{sub}: expected a list")
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: Optional[dict]) -> PipelineConfig:
    return _build(PipelineConfig, data or {}, "")


def load_config(fh: IO[str]) -> PipelineConfig:
    try:
        data = yaml.safe_load(fh)
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from None
    return config_from_dict(data)


def with_overrides(cfg: PipelineConfig, tau_merge: Optional[float] = None) -> PipelineConfig:
    if tau_merge is not None:
        try:
            cfg = dataclasses.replace(cfg, fusion=dataclasses.replace(cfg.fusion, tau_merge=tau_merge))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    return cfg
