"""Experiment configuration: nested dataclasses loaded from YAML.

Unknown keys are rejected and every field is validated before training starts.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .can import CAN_POOL_SCALES, AffinityKind
from .errors import ConfigInvalid

SCHEMA_VERSION = 1
METHODS = ("cankd", "in_l2", "l2")


@dataclass
class OptimConfig:
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 1e-4
    step_epochs: list[int] = field(default_factory=lambda: [16, 22])
    decay_factor: float = 0.1


@dataclass
class DistillSettings:
    enabled: bool = True
    mu: float = 5.0
    # cankd: Can block + instance norm; in_l2: instance norm only; l2: plain L2
    method: str = "cankd"
    affinity: str = "dot_product"
    pool_scale: int = 2
    residual: bool = True
    levels: list[int] = field(default_factory=lambda: [1, 2])
    embed_dim: int | None = None
    norm_eps: float = 1e-5


@dataclass
class NetConfig:
    widths: list[int] = field(default_factory=lambda: [8, 16, 16])
    feature_taps: list[int] = field(default_factory=lambda: [1, 2])


@dataclass
class TeacherConfig(NetConfig):
    widths: list[int] = field(default_factory=lambda: [16, 32, 32])
    epochs: int = 30
    seed: int | None = None  # defaults to the run seed
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(step_epochs=[20, 27]))


@dataclass
class DataConfig:
    height: int = 32
    width: int = 32
    num_classes: int = 4
    train_size: int = 256
    val_size: int = 128


@dataclass
class ExperimentConfig:
    schema_version: int = SCHEMA_VERSION
    seed: int = 0
    epochs: int = 24
    batch_size: int = 16
    log_wall_time: bool = False
    optim: OptimConfig = field(default_factory=OptimConfig)
    distill: DistillSettings = field(default_factory=DistillSettings)
    student: NetConfig = field(default_factory=NetConfig)
    teacher: TeacherConfig = field(default_factory=TeacherConfig)
    data: DataConfig = field(default_factory=DataConfig)

    @property
    def teacher_seed(self) -> int:
        return self.seed if self.teacher.seed is None else self.teacher.seed

    @property
    def distill_active(self) -> bool:
        return self.distill.enabled and self.distill.mu > 0

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def replace(self, **overrides) -> ExperimentConfig:
        """Copy with dotted-key overrides, e.g. ``replace(**{"distill.mu": 2.0})``."""
        d = self.to_dict()
        for key, value in overrides.items():
            set_dotted(d, key, value)
        return from_dict(d)

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigInvalid(msg)

        need(self.schema_version == SCHEMA_VERSION, f"schema_version must be {SCHEMA_VERSION}")
        need(self.epochs >= 1, "epochs must be >= 1")
        need(self.batch_size >= 1, "batch_size must be >= 1")
        for name, o in (("optim", self.optim), ("teacher.optim", self.teacher.optim)):
            need(o.lr > 0, f"{name}.lr must be positive")
            need(0 <= o.momentum < 1, f"{name}.momentum must lie in [0, 1)")
            need(o.weight_decay >= 0, f"{name}.weight_decay must be >= 0")
            need(0 < o.decay_factor <= 1, f"{name}.decay_factor must lie in (0, 1]")
            need(all(e >= 1 for e in o.step_epochs), f"{name}.step_epochs must be positive")
        d = self.distill
        need(d.mu >= 0, "distill.mu must be >= 0")
        need(d.method in METHODS, f"distill.method must be one of {METHODS}")
        try:
            AffinityKind(d.affinity)
        except ValueError:
            raise ConfigInvalid(f"unknown affinity {d.affinity!r}") from None
        need(d.pool_scale in CAN_POOL_SCALES, f"distill.pool_scale must be one of {CAN_POOL_SCALES}")
        need(bool(d.levels), "distill.levels must be non-empty")
        need(d.embed_dim is None or d.embed_dim >= 1, "distill.embed_dim must be >= 1")
        need(d.norm_eps > 0, "distill.norm_eps must be positive")
        for lvl in d.levels:
            need(lvl in self.student.feature_taps and lvl in self.teacher.feature_taps,
                 f"distill level {lvl} is not tapped by both networks")
        need(self.teacher.epochs >= 1, "teacher.epochs must be >= 1")
        dc = self.data
        need(dc.height >= 8 and dc.width >= 8, "data.height/width must be >= 8")
        need(dc.height % 2 == 0 and dc.width % 2 == 0, "data.height/width must be even")
        need(dc.num_classes >= 2, "data.num_classes must be >= 2")
        need(dc.train_size >= 1 and dc.val_size >= 1, "data sizes must be >= 1")
        need(len(self.student.widths) == len(self.teacher.widths), "teacher/student stage counts differ")
        need(all(t >= s for t, s in zip(self.teacher.widths, self.student.widths)),
             "teacher widths must be >= student widths")


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigInvalid(f"{path or 'config'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigInvalid(f"unknown keys at {path or 'top level'}: {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        kwargs[name] = _build(sub, value, f"{path}{name}.") if sub else _coerce(cls, fields[name], value, path)
    return cls(**kwargs)


def _coerce(cls, f: dataclasses.Field, value: Any, path: str):
    where = f"{path}{f.name}"
    ann = str(f.type)
    if ann.startswith("list"):
        if not isinstance(value, list):
            raise ConfigInvalid(f"{where} must be a list")
        return [int(v) for v in value]
    if value is None:
        if "None" in ann:
            return None
        raise ConfigInvalid(f"{where} may not be null")
    try:
        if ann.startswith("bool"):
            if not isinstance(value, bool):
                raise ConfigInvalid(f"{where} must be true/false")
            return value
        if ann.startswith("int"):
            if isinstance(value, bool) or float(value) != int(value):
                raise ConfigInvalid(f"{where} must be an integer")
            return int(value)
        if ann.startswith("float"):
            return float(value)
        if ann.startswith("str"):
            return str(value)
    except (TypeError, ValueError):
        raise ConfigInvalid(f"{where}: cannot interpret {value!r}") from None
    return value


_NESTED = {
    (ExperimentConfig, "optim"): OptimConfig,
    (ExperimentConfig, "distill"): DistillSettings,
    (ExperimentConfig, "student"): NetConfig,
    (ExperimentConfig, "teacher"): TeacherConfig,
    (ExperimentConfig, "data"): DataConfig,
    (TeacherConfig, "optim"): OptimConfig,
}


def from_dict(data: dict[str, Any]) -> ExperimentConfig:
    cfg = _build(ExperimentConfig, copy.deepcopy(data), "")
    cfg.validate()
    return cfg


def set_dotted(d: dict[str, Any], key: str, value: Any) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            raise ConfigInvalid(f"unknown config section {key!r}")
        node = node[p]
    if parts[-1] not in node:
        raise ConfigInvalid(f"unknown config key {key!r}")
    node[parts[-1]] = value


def load_config(path: str | Path | None) -> ExperimentConfig:
    if path is None:
        return from_dict({})
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from exc
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigInvalid(f"config {path} is not valid YAML: {exc}") from exc
    return from_dict(data)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(cfg.to_dict(), sort_keys=False)
