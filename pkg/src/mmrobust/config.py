"""Experiment configuration: a YAML tree with one section per module.

Grammar (every key optional, unknown keys rejected with their field path)::

    name: <str>
    seed: <int>
    world:   {WorldConfig fields}
    data:    {n_train, n_test, images_per_group, captions_per_group}
    reference: {checkpoint: <path or null>, steps: <int or null>}
    augment: {assembly: <str>, specs: [{AugmenterSpec fields}, ...]}
    train:   {TrainConfig fields except seed; budget: {PerturbationBudget fields}}
    eval:    {attacks: [...], budget: {...}, sga_views, sga_scales, diversity_estimator,
              gallery_size, snapshot_every}
    output:  {dir: <path>}

Float fields also accept fractions written as strings, e.g. ``eps: 8/255``.
"""

from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path

import yaml

from .attacks import PerturbationBudget
from .augment import ASSEMBLIES, AugmenterSpec
from .metrics import ATTACKS
from .train import ConfigError, TrainConfig
from .world import WorldConfig


@dataclass
class DataConfig:
    n_train: int = 512
    n_test: int = 128
    images_per_group: int = 1
    captions_per_group: int = 5


@dataclass
class ReferenceConfig:
    """The frozen reference encoder: a checkpoint path, or (if null) a clean
    model trained on the base training set with ``steps`` steps (default: the
    train section's)."""

    checkpoint: str | None = None
    steps: int | None = None


@dataclass
class AugmentConfig:
    assembly: str = "one-to-many"
    specs: list[AugmenterSpec] = field(default_factory=list)


@dataclass
class EvalConfig:
    attacks: list[str] = field(default_factory=lambda: list(ATTACKS))
    budget: PerturbationBudget = field(default_factory=lambda: PerturbationBudget(steps=10))
    sga_views: int = 2
    sga_scales: list[float] = field(default_factory=lambda: [0.75, 1.0, 1.25])
    diversity_estimator: str = "per-pair-categorical"
    # rank test groups in independent galleries of this size (null: one gallery)
    gallery_size: int | None = None
    # clean recall snapshots in the RunLog every k steps (0: none)
    snapshot_every: int = 0


@dataclass
class OutputConfig:
    dir: str | None = None


@dataclass
class ExperimentConfig:
    name: str = "experiment"
    seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    data: DataConfig = field(default_factory=DataConfig)
    reference: ReferenceConfig = field(default_factory=ReferenceConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output: OutputConfig = field(default_factory=OutputConfig)

    def validate(self) -> None:
        self.world.validate()
        if self.data.n_train < 1 or self.data.n_test < 1:
            raise ConfigError("data: n_train and n_test must be positive")
        if self.augment.assembly not in ASSEMBLIES:
            raise ConfigError(f"augment.assembly: must be one of {ASSEMBLIES}")
        for a in self.eval.attacks:
            if a not in ATTACKS:
                raise ConfigError(f"eval.attacks: unknown attack {a!r}")
        g = self.eval.gallery_size
        if g is not None and (g < 1 or self.data.n_test % g):
            raise ConfigError("eval.gallery_size must divide data.n_test")
        if self.eval.diversity_estimator not in ("per-pair-categorical", "gaussian-fit"):
            raise ConfigError("eval.diversity_estimator: unknown estimator")
        self.train.validate()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"].pop("seed")
        return d

    def digest(self) -> str:
        """Hash of everything that determines results (the output dir does not)."""
        d = self.to_dict()
        d.pop("output")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]

    def stage_seed(self, stage: str) -> int:
        return stage_seed(self.seed, stage)

    def train_config(self) -> TrainConfig:
        return dataclasses.replace(self.train, seed=self.stage_seed("train"))

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def with_value(self, path: str, value) -> "ExperimentConfig":
        """Copy with one scalar leaf replaced; ``path`` is dotted, list indices allowed."""
        d = self.to_dict()
        keys = path.split(".")
        node = d
        for i, k in enumerate(keys[:-1]):
            node = _child(node, k, ".".join(keys[: i + 1]))
        last = keys[-1]
        current = _child(node, last, path)
        if isinstance(current, (dict, list)):
            raise ConfigError(f"{path}: not a scalar field")
        if isinstance(node, list):
            node[int(last)] = value
        else:
            node[last] = value
        return from_dict(d)


def _child(node, key: str, path: str):
    if isinstance(node, list):
        try:
            return node[int(key)]
        except (ValueError, IndexError):
            raise ConfigError(f"{path}: no such list element") from None
    if not isinstance(node, dict) or key not in node:
        raise ConfigError(f"{path}: unknown field")
    return node[key]


def stage_seed(seed: int, stage: str) -> int:
    """Per-stage seed: adding a stage never changes another stage's stream."""
    h = hashlib.sha256(f"{int(seed)}/{stage}".encode()).digest()
    return int.from_bytes(h[:4], "little")


# --------------------------------------------------------------------------
# parsing


def _coerce(value, tp, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, getattr(__import__("types"), "UnionType", None)):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(value, inner[0], path)
    if dataclasses.is_dataclass(tp):
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list")
        return [_coerce(v, args[0], f"{path}.{i}") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, str):
            try:
                return float(Fraction(value.replace(" ", "")))
            except (ValueError, ZeroDivisionError):
                raise ConfigError(f"{path}: expected a number, got {value!r}") from None
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    return value


def _build(cls, data, path: str):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, value in data.items():
        sub = f"{path}.{key}" if path else str(key)
        if key not in names or (cls is TrainConfig and key == "seed"):
            raise ConfigError(f"{sub}: unknown key")
        kwargs[key] = _coerce(value, hints[key], sub)
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path or '<root>'}: {exc}") from None


def from_dict(data: dict) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, copy.deepcopy(data), "")
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from None
    return from_dict(data or {})
