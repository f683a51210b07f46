"""Run configuration: one flat table of hyperparameters plus a nested synth table.

Precedence is defaults < JSON config file < ``key=value`` overrides. Unknown
keys are rejected so that typos surface instead of silently doing nothing.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Optional

from .data import SynthConfig
from .model import ModelConfig
from .training import TrainConfig


class ConfigError(ValueError):
    """Malformed config file or override."""


@dataclass
class RunConfig:
    # objective
    lambda1: float = 10.0
    lambda2: float = 1.0
    lambda3: float = 1e-5
    alpha: float = 0.8
    tau: float = 0.7
    M: int = 10
    offset_positives_only: bool = True
    stop_gradient: bool = True
    # optimisation
    lr: float = 1e-3
    epochs: int = 10
    decay_after: int = 5
    batch_size: int = 16
    seed: int = 0
    # sampling
    sampler: str = "continuous"
    grid_per_video: int = 64
    uniform_per_video: int = 64
    n_per_gt: int = 16
    kappa: float = 0.25
    # model
    hidden: tuple = (64, 64)
    state_dim: int = 32
    bins: int = 16
    frames_per_snippet: int = 16
    # inference
    nms_threshold: float = 0.3
    score_floor: float = 1e-4
    q: int = 100
    group_threshold: float = 0.5
    synth: SynthConfig = field(default_factory=SynthConfig)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if isinstance(self.synth, dict):
            self.synth = _build(SynthConfig, self.synth, "synth.")
        if not 0.0 <= self.nms_threshold <= 1.0:
            raise ConfigError("nms_threshold must lie in [0, 1]")
        if self.q < 1:
            raise ConfigError("q must be >= 1")
        try:
            self.train_config()
            ModelConfig(1, self.hidden, self.state_dim, self.bins, self.frames_per_snippet)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_config(self) -> TrainConfig:
        names = {f.name for f in fields(TrainConfig)}
        return TrainConfig(**{k: getattr(self, k) for k in names})

    def model_config(self, feature_dim: int) -> ModelConfig:
        return ModelConfig(feature_dim, self.hidden, self.state_dim, self.bins,
                           self.frames_per_snippet)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["synth"] = self.synth.to_dict()
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        return _build(cls, d, "")

    def with_overrides(self, pairs: Iterable[str]) -> "RunConfig":
        d = self.to_dict()
        for pair in pairs:
            key, sep, raw = pair.partition("=")
            if not sep or not key:
                raise ConfigError(f"override {pair!r} is not of the form key=value")
            target, name = d, key
            if key.startswith("synth."):
                target, name = d["synth"], key[len("synth."):]
            if name not in target:
                raise ConfigError(f"unknown config key {key!r}")
            target[name] = _parse_value(raw)
        return RunConfig.from_dict(d)


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _build(cls, d: dict, prefix: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid {prefix or 'config '}values: {exc}") from exc


def load_config(path: Optional[Path] = None, overrides: Iterable[str] = (),
                seed: Optional[int] = None) -> RunConfig:
    """Resolve defaults, then ``path``, then ``overrides``, then ``seed``."""
    cfg = RunConfig()
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc})") from exc
        base = cfg.to_dict()
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
        synth = raw.pop("synth", {})
        if not isinstance(synth, dict):
            raise ConfigError(f"{path}: 'synth' must be an object")
        base.update(raw)
        base["synth"].update(synth)
        cfg = RunConfig.from_dict(base)
    cfg = cfg.with_overrides(overrides)
    if seed is not None:
        cfg = cfg.with_overrides([f"seed={seed}", f"synth.seed={seed}"])
    return cfg
