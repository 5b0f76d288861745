"""Run configuration: INI-style `[section]` headers with `key = value` lines.

Sections are `model`, `data`, `train`, `schedule` and `run`; tuples are
comma separated, `none` marks an absent optional, `#`/`;` start comments.
Unknown sections and keys are rejected.
"""
from __future__ import annotations
import configparser
import hashlib
from dataclasses import dataclass, field, fields, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union, get_args, get_origin, get_type_hints

from flowshape.services.editing import EditSchedule
from flowshape.services.errors import ConfigurationError, StorageError
from flowshape.services.network import ModelConfig
from flowshape.services.scenes import inventory_vocabulary


@dataclass(frozen=True)
class DataConfig:
    dir: str = "dataset"
    count: int = 2048
    pairs: int = 50
    max_objects: int = 2
    canvas: int = 64


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 40
    batch_size: int = 64
    lr: float = 5e-4
    cond_dropout: float = 0.1
    adapter_prob: float = 0.5
    accept_loss: float = 0.5
    checkpoint: str = "model/model.ckpt"


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    out: str = "out"


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    schedule: EditSchedule = field(default_factory=EditSchedule)
    run: RunSection = field(default_factory=RunSection)

    def __post_init__(self) -> None:
        vocab = len(inventory_vocabulary(self.data.max_objects))
        if self.model.vocab_size != vocab:
            raise ConfigurationError(
                f"model.vocab_size={self.model.vocab_size} but data.max_objects={self.data.max_objects} "
                f"yields {vocab} conditions"
            )
        for axis in (self.model.grid_height, self.model.grid_width):
            if axis * self.model.patch_size != self.data.canvas:
                raise ConfigurationError(
                    f"token grid {axis} x patch {self.model.patch_size} does not cover the {self.data.canvas}px canvas"
                )
        if len(self.schedule.adapter_strengths) != self.model.adapter_branches:
            raise ConfigurationError(
                f"{len(self.schedule.adapter_strengths)} adapter strengths for "
                f"{self.model.adapter_branches} adapter branches"
            )


SECTIONS = ("model", "data", "train", "schedule", "run")


def _coerce(raw: str, hint, where: str):
    raw = raw.strip()
    origin = get_origin(hint)
    try:
        if origin is Union:
            args = [a for a in get_args(hint) if a is not type(None)]
            if raw.lower() == "none":
                return None
            return _coerce(raw, args[0], where)
        if origin is tuple:
            elem = get_args(hint)[0]
            return tuple(_coerce(item, elem, where) for item in raw.split(",") if item.strip())
        if hint is bool:
            lowered = raw.lower()
            if lowered in ("true", "yes", "on", "1"):
                return True
            if lowered in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if isinstance(hint, type) and issubclass(hint, Enum):
            return hint(raw)
        return hint(raw)
    except (TypeError, ValueError):
        raise ConfigurationError(f"{where}: cannot parse {raw!r}") from None


def _format(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, Enum):
        return str(value.value)
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    return str(value)


def _update(section: str, current, values: Dict[str, str]):
    hints = get_type_hints(type(current))
    known = {f.name for f in fields(current)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigurationError(f"unknown key {section}.{key}")
        changes[key] = _coerce(raw, hints[key], f"{section}.{key}")
    return replace(current, **changes) if changes else current


def _build(config: RunConfig, values: Dict[str, Dict[str, str]]) -> RunConfig:
    sections = {}
    for name, entries in values.items():
        if name not in SECTIONS:
            raise ConfigurationError(f"unknown section [{name}]")
        sections[name] = _update(name, getattr(config, name), entries)
    return replace(config, **sections) if sections else config


def parse_config(text: str, base: Optional[RunConfig] = None) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as e:
        raise ConfigurationError(f"malformed config: {e}") from e
    values = {name: dict(parser.items(name)) for name in parser.sections()}
    return _build(base or RunConfig(), values)


def load_config(path: Optional[Union[str, Path]] = None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.exists():
        raise StorageError(f"{path}: config file not found")
    return parse_config(path.read_text(encoding="utf-8"))


def apply_overrides(config: RunConfig, assignments: Iterable[str]) -> RunConfig:
    """Apply `section.key=value` strings, e.g. `schedule.k_front=3`."""
    values: Dict[str, Dict[str, str]] = {}
    for item in assignments:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(f"override {item!r} is not section.key=value")
        dotted, raw = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        values.setdefault(section, {})[key] = raw
    return _build(config, values)


def dump_config(config: RunConfig) -> str:
    lines: List[str] = []
    for name in SECTIONS:
        section = getattr(config, name)
        lines.append(f"[{name}]")
        lines += [f"{f.name} = {_format(getattr(section, f.name))}" for f in fields(section)]
        lines.append("")
    return "\n".join(lines)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(dump_config(config).encode("utf-8")).hexdigest()


def section_fields(section) -> Dict[str, str]:
    return {f.name: _format(getattr(section, f.name)) for f in fields(section)}
