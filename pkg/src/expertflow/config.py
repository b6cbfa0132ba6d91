"""Run configuration: JSON files plus dotted ``--section.key=value`` overrides.

Parsing is strict. Unknown keys and type mismatches raise ``ConfigError``
naming the full key path.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any

from .exceptions import ConfigError
from .lifecycle import LifecycleConfig
from .losses import LossWeights
from .model import ModelConfig
from .synthdata import SynthConfig


@dataclass
class StepsConfig:
    s1: int = 500
    s2: int = 1000
    s3: int = 1000

    def __post_init__(self):
        if min(self.s1, self.s2, self.s3) < 0:
            raise ConfigError("steps.s1/s2/s3 must be >= 0")


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 3e-4
    n_train: int = 300
    n_val: int = 300
    checkpoint_every_stage: bool = True

    def __post_init__(self):
        if self.batch_size < 1 or self.n_train < 1 or self.n_val < 1:
            raise ConfigError("train.batch_size, train.n_train and train.n_val must be >= 1")
        if not self.lr > 0:
            raise ConfigError("train.lr must be > 0")


SECTIONS = {
    "model": ModelConfig,
    "lifecycle": LifecycleConfig,
    "losses": LossWeights,
    "data": SynthConfig,
    "steps": StepsConfig,
    "train": TrainConfig,
}


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lifecycle: LifecycleConfig = field(default_factory=LifecycleConfig)
    losses: LossWeights = field(default_factory=LossWeights)
    data: SynthConfig = field(default_factory=SynthConfig)
    steps: StepsConfig = field(default_factory=StepsConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        m, d, lc = self.model, self.data, self.lifecycle
        if d.dim != m.d:
            raise ConfigError(f"data.dim ({d.dim}) must equal model.d ({m.d})")
        if d.text_vocab != m.text_vocab:
            raise ConfigError(f"data.text_vocab ({d.text_vocab}) must equal model.text_vocab ({m.text_vocab})")
        if d.frames > m.max_frames:
            raise ConfigError(f"data.frames ({d.frames}) exceeds model.max_frames ({m.max_frames})")
        if d.max_events > m.max_events:
            raise ConfigError(f"data.max_events ({d.max_events}) exceeds model.max_events ({m.max_events})")
        if not lc.K_min <= m.K_init <= lc.K_max:
            raise ConfigError(f"model.K_init ({m.K_init}) must lie in [lifecycle.K_min, lifecycle.K_max]")
        if m.seed != self.seed:
            self.model = dataclasses.replace(m, seed=self.seed)

    def to_dict(self) -> dict:
        out = {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}
        out["seed"] = self.seed
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _coerce(path: str, value: Any, default: Any):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected bool, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected int, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected list, got {value!r}")
        return tuple(value)
    return value


def _build_section(name: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(f"{name}: expected an object")
    defaults = cls()
    known = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {name}.{key}")
        kwargs[key] = _coerce(f"{name}.{key}", value, getattr(defaults, key))
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{name}: {exc}") from exc


def from_dict(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config root must be an object")
    kwargs = {}
    for key, value in raw.items():
        if key == "seed":
            kwargs["seed"] = _coerce("seed", value, 0)
        elif key in SECTIONS:
            kwargs[key] = _build_section(key, SECTIONS[key], value)
        else:
            raise ConfigError(f"unknown config key {key}")
    return RunConfig(**kwargs)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``section.key=value`` strings to a raw config dict (copied)."""
    out = json.loads(json.dumps(raw))
    for item in overrides:
        item = item[2:] if item.startswith("--") else item
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        path, text = item.split("=", 1)
        keys = path.split(".")
        if keys == ["seed"]:
            out["seed"] = _parse_value(text)
            continue
        if len(keys) != 2:
            raise ConfigError(f"override path {path!r} must be section.key")
        section, key = keys
        if section not in SECTIONS:
            raise ConfigError(f"unknown config key {section}")
        out.setdefault(section, {})[key] = _parse_value(text)
    return out


def load_config(path=None, overrides=()) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    return from_dict(apply_overrides(raw, overrides))
