"""Experiment configuration: defaults, JSON files, CLI overrides."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional

from .data import SynthConfig
from .training import TrainConfig

SEED_ENV = "IMML_SEED"
MODEL_KINDS = ("m", "u", "vanilla-transformer", "mlp-ablation", "unimodal-ablation")


class ConfigError(ValueError):
    pass


def _default_seed() -> int:
    raw = os.environ.get(SEED_ENV)
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


@dataclass
class ExperimentConfig(TrainConfig):
    kind: str = "u"
    k_folds: int = 5
    jobs: int = 1
    grid: bool = False
    features: Optional[str] = None
    labels: Optional[str] = None
    teacher: Optional[str] = None
    synth: SynthConfig = field(default_factory=SynthConfig)

    def validate(self) -> "ExperimentConfig":
        if self.task not in ("regression", "classification"):
            raise ConfigError(f"unknown task {self.task!r}")
        if self.kind not in MODEL_KINDS:
            raise ConfigError(f"unknown model kind {self.kind!r}; choose from {MODEL_KINDS}")
        if self.backbone not in ("transformer", "mlp"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        for name in ("d1", "d2", "n_heads", "d_sphere", "batch_size", "k_folds", "jobs"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        for name in ("n_layers", "epochs_m", "epochs_u"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.backbone == "transformer" and (self.d1 % self.n_heads or self.d2 % self.n_heads):
            raise ConfigError("d1 and d2 must be divisible by n_heads")
        if self.d_sphere >= self.d2:
            raise ConfigError("d_sphere must be smaller than d2")
        if self.lr <= 0 or self.weight_decay < 0:
            raise ConfigError("lr must be positive and weight_decay non-negative")
        if self.alpha < 0 or self.beta < 0 or self.temperature <= 0:
            raise ConfigError("alpha, beta must be non-negative and temperature positive")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")
        if self.synth.task != self.task:
            self.synth.task = self.task
        try:
            SynthConfig(**asdict(self.synth))
        except ValueError as exc:
            raise ConfigError(f"synth: {exc}") from None
        return self

    def estimator_params(self) -> Dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(TrainConfig)}

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: Dict[str, Any]) -> "ExperimentConfig":
        raw = dict(raw)
        known = {f.name for f in fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        synth_raw = raw.pop("synth", None) or {}
        synth_known = {f.name for f in fields(SynthConfig)}
        bad = set(synth_raw) - synth_known
        if bad:
            raise ConfigError(f"unknown synth keys: {sorted(bad)}")
        if "seed" not in raw:
            raw["seed"] = _default_seed()
        try:
            synth = SynthConfig(**{"seed": raw["seed"], **synth_raw})
            return cls(synth=synth, **raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def resolve_config(path: Optional[str], overrides: Dict[str, Any]) -> ExperimentConfig:
    """Defaults, then the JSON file at ``path``, then non-None ``overrides``."""
    raw: Dict[str, Any] = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top-level JSON value must be an object")
    for key, value in overrides.items():
        if value is None:
            continue
        if key.startswith("synth."):
            raw.setdefault("synth", {})[key[6:]] = value
        else:
            raw[key] = value
    return ExperimentConfig.from_dict(raw).validate()
