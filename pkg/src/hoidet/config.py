"""Config file loading: one JSON file carries model/train/gen/loss sections."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

from .data import GenConfig
from .errors import ConfigError
from .loss import LossConfig
from .model import ModelConfig
from .train import TrainConfig

_SECTIONS = {"model": ModelConfig, "train": TrainConfig,
             "gen": GenConfig, "loss": LossConfig}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def as_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name))
                for name in _SECTIONS}

    def digest(self) -> str:
        canon = json.dumps(self.as_dict(), sort_keys=True,
                           separators=(",", ":"))
        return hashlib.sha256(canon.encode()).hexdigest()


def _build_section(cls, payload: dict, section: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(payload) - known)
    if unknown:
        raise ConfigError(f"config section '{section}' has unknown keys: "
                          f"{unknown}")
    if "frozen_stage2" in payload and payload["frozen_stage2"] is not None:
        payload = dict(payload)
        payload["frozen_stage2"] = tuple(payload["frozen_stage2"])
    return cls(**payload)


def load_config(path=None) -> RunConfig:
    """Load a config file; missing sections fall back to defaults."""
    if path is None:
        return RunConfig()
    with open(path, "r", encoding="utf-8") as f:
        try:
            obj = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: not valid JSON: {e}") from e
    if not isinstance(obj, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(obj) - set(_SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown sections: {unknown}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        payload = obj.get(name, {})
        if not isinstance(payload, dict):
            raise ConfigError(f"{path}: section '{name}' must be an object")
        kwargs[name] = _build_section(cls, payload, name)
    cfg = RunConfig(**kwargs)
    cfg.gen.validate()
    cfg.loss.validate()
    return cfg
