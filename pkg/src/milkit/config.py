"""Experiment configuration file: one JSON document with ``env``, ``arch``,
``data``, and ``train`` sections mapped onto the corresponding dataclasses.
Unknown fields are rejected by name; architecture fields that must mirror the
environment (modality, observation sizes) are derived automatically.
"""

from __future__ import annotations

import dataclasses
import json

from .dataset import DatasetConfig
from .env import EnvConfig
from .meta import TrainConfig
from .policy import ArchitectureConfig

__all__ = ["ExperimentConfig", "ConfigError", "load_config", "dump_config"]


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclasses.dataclass
class ExperimentConfig:
    env: EnvConfig
    arch: ArchitectureConfig
    data: DatasetConfig
    train: TrainConfig
    lstm_width: int = 512

    def as_dict(self) -> dict:
        return {
            "env": dataclasses.asdict(self.env),
            "arch": dataclasses.asdict(self.arch),
            "data": dataclasses.asdict(self.data),
            "train": dataclasses.asdict(self.train),
            "lstm_width": self.lstm_width,
        }


_TUPLE_FIELDS = {"image_hw", "link_lengths", "link_masses", "reach_range",
                 "rest_pose", "inner_clip", "meta_clip"}


def _build(cls, section: dict, name: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - known
    if unknown:
        raise ConfigError(f"unknown field(s) in section '{name}': {sorted(unknown)}")
    coerced = {k: (tuple(v) if k in _TUPLE_FIELDS and v is not None else v)
               for k, v in section.items()}
    try:
        return cls(**coerced)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad value in section '{name}': {e}") from None


def _derive_arch(env: EnvConfig, arch: ArchitectureConfig) -> ArchitectureConfig:
    """The observation-facing architecture fields follow the environment."""
    return dataclasses.replace(
        arch, vision=env.vision, image_hw=env.image_hw,
        state_dim=env.state_dim, config_dim=env.config_dim, action_dim=2)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config: {e}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(
            f"{path}: invalid JSON at line {e.lineno}, column {e.colno}: {e.msg}"
        ) from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    unknown = set(raw) - {"env", "arch", "data", "train", "lstm_width"}
    if unknown:
        raise ConfigError(f"unknown top-level section(s): {sorted(unknown)}")
    env = _build(EnvConfig, raw.get("env", {}), "env")
    arch = _derive_arch(env, _build(ArchitectureConfig, raw.get("arch", {}), "arch"))
    data = _build(DatasetConfig, raw.get("data", {}), "data")
    train = _build(TrainConfig, raw.get("train", {}), "train")
    width = raw.get("lstm_width", 512)
    if not isinstance(width, int) or width < 1:
        raise ConfigError("lstm_width must be a positive integer")
    return ExperimentConfig(env=env, arch=arch, data=data, train=train, lstm_width=width)


def dump_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(cfg.as_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
