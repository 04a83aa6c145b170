"""Run configuration: a JSON document mapped onto nested dataclasses.

Top-level keys mirror :class:`RunConfig`; ``network``, ``augment``,
``loss``, ``optimizer``, ``schedule`` and ``eval`` are nested objects.
Unknown keys anywhere are rejected.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .network import NetworkConfig
from .objectives import LossWeights
from .scenes import AugmentConfig


class ConfigError(ValueError):
    pass


@dataclass
class OptimizerConfig:
    lr: float = 0.003
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class ScheduleConfig:
    warmup_frac: float = 0.3
    div_factor: float = 25.0          # initial lr = peak / div_factor
    final_div_factor: float = 1000.0  # final lr = peak / final_div_factor


@dataclass
class EvalConfig:
    score_threshold: float = 0.3
    max_detections: int = 50
    iou_weight: float = 0.5
    match_radius: float = 0.5


@dataclass
class DataConfig:
    num_scenes: int = 4
    min_humans: int = 2
    max_humans: int = 5
    clutter_density: float = 0.05
    extent: float = 24.0
    ground_points: int = 1200


@dataclass
class RunConfig:
    data_dir: str = "data"
    out_dir: str = "runs"
    seed: int = 0
    steps: int = 800
    batch_size: int = 2
    augment_enabled: bool = True
    checkpoint_every: int = 0
    dtype: str = "float32"
    data: DataConfig = field(default_factory=DataConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.optimizer.lr <= 0:
            raise ConfigError("optimizer.lr must be > 0")
        if self.steps < 1:
            raise ConfigError("steps must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")
        if not 0 <= self.schedule.warmup_frac < 1:
            raise ConfigError("schedule.warmup_frac must lie in [0, 1)")
        if self.data.min_humans > self.data.max_humans or self.data.min_humans < 0:
            raise ConfigError("data: need 0 <= min_humans <= max_humans")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_NESTED = {
    "data": DataConfig, "augment": AugmentConfig, "loss": LossWeights,
    "optimizer": OptimizerConfig, "schedule": ScheduleConfig, "eval": EvalConfig,
}


def _build(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    unknown = set(d) - {f.name for f in fields(cls)}
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    return cls(**d)


def config_from_dict(d: dict) -> RunConfig:
    if not isinstance(d, dict):
        raise ConfigError("config root must be an object")
    unknown = set(d) - {f.name for f in fields(RunConfig)}
    if unknown:
        raise ConfigError(f"unknown config keys {sorted(unknown)}")
    kw = dict(d)
    try:
        for name, cls in _NESTED.items():
            if name in kw:
                sub = kw[name]
                if not isinstance(sub, dict):
                    raise ConfigError(f"{name}: expected an object")
                kw[name] = AugmentConfig.from_dict(sub) if cls is AugmentConfig else _build(cls, sub, name)
        if "network" in kw:
            if not isinstance(kw["network"], dict):
                raise ConfigError("network: expected an object")
            kw["network"] = NetworkConfig.from_dict(kw["network"])
        return RunConfig(**kw)
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        d = json.loads(p.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{p}: invalid JSON ({e})") from e
    return config_from_dict(d)
