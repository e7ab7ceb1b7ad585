"""Declarative run configuration (JSON) with dotted-path overrides."""

import copy
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .data import DomainPairSpec
from .errors import ConfigError
from .model import ArchConfig
from .trainer import VARIANTS, TrainConfig

SCHEMA_VERSION = 1

_SECTIONS = ("schema_version", "out_dir", "data", "model", "train", "ablate", "paths")


@dataclass
class AblateConfig:
    variants: list = field(default_factory=lambda: list(VARIANTS))
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    k_values: list = field(default_factory=list)
    workers: int = 1

    def validate(self):
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}", "ablate.variants")
        if not self.seeds or any(isinstance(s, bool) or not isinstance(s, int) or s < 0 for s in self.seeds):
            raise ConfigError("seeds must be a nonempty list of nonnegative integers", "ablate.seeds")
        if any(isinstance(k, bool) or not isinstance(k, int) or k < 1 for k in self.k_values):
            raise ConfigError("k_values must be positive integers", "ablate.k_values")
        if isinstance(self.workers, bool) or not isinstance(self.workers, int) or self.workers < 1:
            raise ConfigError("workers must be a positive integer", "ablate.workers")


@dataclass
class PathsConfig:
    """Dataset files for train/ablate.  Unset paths mean the pair is
    generated in memory from the ``data`` section."""

    source: str | None = None
    target: str | None = None

    def validate(self):
        if (self.source is None) != (self.target is None):
            raise ConfigError("set both paths.source and paths.target, or neither", "paths")


@dataclass
class RunConfig:
    data: DomainPairSpec = field(default_factory=DomainPairSpec)
    model: ArchConfig = field(default_factory=ArchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    out_dir: str = "out"
    schema_version: int = SCHEMA_VERSION

    def validate(self):
        if self.schema_version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported schema_version {self.schema_version!r}", "schema_version")
        if not isinstance(self.out_dir, str) or not self.out_dir:
            raise ConfigError("out_dir must be a nonempty string", "out_dir")
        try:
            self.data.validate()
        except ConfigError as e:
            raise ConfigError(str(e), f"data.{e.field}") from None
        self.model.validate()
        self.train.validate()
        self.ablate.validate()
        self.paths.validate()
        return self

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "out_dir": self.out_dir,
            "data": asdict(self.data),
            "model": asdict(self.model),
            "train": self.train.to_dict(),
            "ablate": asdict(self.ablate),
            "paths": asdict(self.paths),
        }

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config root must be an object", "")
        for key in d:
            if key not in _SECTIONS:
                raise ConfigError(f"unknown config section {key!r}", key)
        kw = {}
        for key, klass in (("data", DomainPairSpec), ("ablate", AblateConfig), ("paths", PathsConfig)):
            if key in d:
                kw[key] = _build(klass, d[key], key)
        if "model" in d:
            kw["model"] = ArchConfig.from_dict(_section(d["model"], "model"))
        if "train" in d:
            kw["train"] = TrainConfig.from_dict(_section(d["train"], "train"))
        for key in ("out_dir", "schema_version"):
            if key in d:
                kw[key] = d[key]
        return cls(**kw)


def _section(value, name):
    if not isinstance(value, dict):
        raise ConfigError(f"{name} must be an object", name)
    return value


def _build(klass, value, name):
    value = _section(value, name)
    known = klass.__dataclass_fields__
    for key in value:
        if key not in known:
            raise ConfigError(f"unknown field {key!r}", f"{name}.{key}")
    try:
        return klass(**value)
    except TypeError as e:
        raise ConfigError(str(e), name) from None


def parse_override(text):
    """``"train.lr=0.01"`` -> ``(["train", "lr"], 0.01)``.  Values are read
    as JSON when they parse, else kept as plain strings."""
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override {text!r} is not of the form dotted.key=value", "--set")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(raw, overrides):
    out = copy.deepcopy(raw)
    for path, value in overrides:
        node = out
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot descend into non-object at {part!r}", ".".join(path))
        node[path[-1]] = value
    return out


def load_config(path=None, overrides=()):
    """Read, override and validate a run config.  ``path=None`` starts from
    the built-in defaults."""
    raw = {}
    if path is not None:
        text = Path(path).read_text()
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})", "") from None
    raw = apply_overrides(raw, [parse_override(o) if isinstance(o, str) else o for o in overrides])
    return RunConfig.from_dict(raw).validate()
