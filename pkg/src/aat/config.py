"""Experiment configuration: a JSON document mapped onto nested dataclasses.

Every key is checked. A misspelt hyperparameter is an error rather than a
silently ignored default::

    {
      "seed": 0,
      "data": {"sizes": [2000, 2000, 2000],
               "scene": {"class_weights": [10, 10, 1, 1]},
               "target": {"haze": 0.35}},
      "train": {"adapt_steps": 3000, "beta": 0.0078, "apr": true},
      "eval_every": 500,
      "output_dir": "runs/demo"
    }

Sections may be omitted; missing keys take their defaults.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from aat.experiment import experiment_id
from aat.synthdata import SOURCE, TARGET, DomainConfig, SceneSpec, StrongAugConfig
from aat.teacher_student import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the message carries the dotted key path."""


@dataclass
class DataConfig:
    sizes: tuple[int, int, int] = (2000, 2000, 2000)
    scene: SceneSpec = field(default_factory=SceneSpec)
    source: DomainConfig = field(default_factory=lambda: SOURCE)
    target: DomainConfig = field(default_factory=lambda: TARGET)


@dataclass
class ExperimentConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval_every: int = 500
    checkpoint_every: int = 0
    output_dir: str = "runs"

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def identity(self, seed: int | None = None) -> str:
        """16-hex-digit hash of the config and seed; the output directory is not part of it."""
        body = self.to_dict()
        body.pop("output_dir")
        s = self.seed if seed is None else seed
        body.pop("seed")
        return experiment_id(body, s)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_NESTED = {
    ExperimentConfig: {"data": DataConfig, "train": TrainConfig},
    DataConfig: {"scene": SceneSpec, "source": DomainConfig, "target": DomainConfig},
    TrainConfig: {"strong_aug": StrongAugConfig},
}


def _plain(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def _build(cls, doc: Any, path: str):
    if not isinstance(doc, dict):
        raise ConfigError(f"{path or '<root>'}: expected an object, got {type(doc).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(names))
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"unknown key(s) {', '.join(where + k for k in unknown)}; allowed: {sorted(names)}")
    nested = _NESTED.get(cls, {})
    kwargs = {}
    defaults = cls()
    for key, value in doc.items():
        sub = f"{path}.{key}" if path else key
        if key in nested:
            kwargs[key] = _build(nested[key], value, sub)
            continue
        current = getattr(defaults, key)
        kwargs[key] = _coerce(current, value, sub)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or '<root>'}: {exc}") from exc


def _coerce(default: Any, value: Any, path: str) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if isinstance(default, tuple):
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if default and len(value) != len(default) and path.split(".")[-1] in ("sizes", "count_range", "size_range"):
            raise ConfigError(f"{path}: expected {len(default)} entries, got {len(value)}")
        if default and all(isinstance(x, float) for x in default):
            return tuple(float(x) for x in value)
        return tuple(value)
    return value


def config_from_dict(doc: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, doc, "")
    scene = cfg.data.scene
    if len(scene.class_weights) != len(scene.classes):
        raise ConfigError("data.scene: class_weights and classes differ in length")
    if cfg.train.num_classes != len(scene.classes):
        raise ConfigError(
            f"train.num_classes={cfg.train.num_classes} but data.scene lists {len(scene.classes)} classes"
        )
    if cfg.train.image_size != scene.image_size:
        raise ConfigError("train.image_size must equal data.scene.image_size")
    return cfg


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read a JSON config; ``None`` gives the defaults."""
    if path is None:
        return ExperimentConfig()
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    return config_from_dict(doc)
