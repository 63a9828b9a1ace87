"""Run configuration: one JSON file, every field defaulted, unknown keys rejected.

Example::

    {
      "seed": 0,
      "paths": {"data_dir": "data", "checkpoint": "runs/spam.ckpt", "reports_dir": "reports"},
      "model": {"h": 64, "heads": 4, "layers": 2},
      "loss": {"lambda_c": 1.0, "lambda_p": 0.1, "lambda_v": 0.1, "lambda_e": 0.1,
               "temperature": 0.07, "huber_delta": 1.0},
      "train": {"batch_size": 32, "lr": 0.0003, "max_steps": 20000, "patience": 10},
      "eval": {"alpha": 0.05}
    }
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .model import ModelConfig
from .training import LossWeights, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class PathsConfig:
    data_dir: str = "data"
    checkpoint: str = "runs/spam.ckpt"
    reports_dir: str = "reports"


@dataclass
class EvalConfig:
    alpha: float = 0.05


@dataclass
class RunConfig:
    seed: int = 0
    paths: PathsConfig = field(default_factory=PathsConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, train=replace(self.train, seed=seed))


_SECTIONS = {
    "paths": PathsConfig,
    "model": ModelConfig,
    "loss": LossWeights,
    "train": TrainConfig,
    "eval": EvalConfig,
}


def _build(cls, data, section: str):
    if not isinstance(data, dict):
        raise ConfigError(f"section {section!r} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def config_from_dict(data: dict) -> RunConfig:
    unknown = set(data) - {"seed", *_SECTIONS}
    if unknown:
        raise ConfigError(f"unknown top-level keys: {sorted(unknown)}")
    sections = {name: _build(cls, data.get(name, {}), name) for name, cls in _SECTIONS.items()}
    seed = data.get("seed", 0)
    if not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    config = RunConfig(seed=seed, **sections)
    if "seed" not in data.get("train", {}):
        config = replace(config, train=replace(config.train, seed=seed))
    return config


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    return config_from_dict(data)


def write_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
