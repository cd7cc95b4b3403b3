"""RunConfig: one merged configuration for every command.

Loaded from a JSON or YAML file, then patched with ``section.field=value``
overrides. The global ``seed`` is mandatory and fills every per-section
seed the file leaves unset.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any

import yaml

from .data import WorldConfig
from .model import ModelConfig
from .train import TrainConfig

# vocabulary sizes always come from the dataset
DATA_DERIVED_MODEL_FIELDS = ("n_items", "n_authors", "n_tags", "n_users", "n_devices", "n_age", "n_gender",
                             "n_region")


class ConfigError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field
        self.message = message


@dataclass
class IndexConfig:
    approx: bool = True
    n_lists: int | None = None
    nprobe: int | None = None
    seed: int = 0


@dataclass
class ServeConfig:
    transport: str = "stdio"
    host: str = "127.0.0.1"
    port: int = 8765
    q_total: int = 300
    mode: str = "exact"
    workers: int = 0
    history_window: int | None = None


@dataclass
class RunConfig:
    seed: int
    world: WorldConfig = field(default_factory=WorldConfig)
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    index: IndexConfig = field(default_factory=IndexConfig)
    serve: ServeConfig = field(default_factory=ServeConfig)

    def to_dict(self) -> dict:
        return {"seed": self.seed, "world": self.world.to_dict(), "model": dict(sorted(self.model.items())),
                "train": self.train.to_dict(), "index": asdict(self.index), "serve": asdict(self.serve)}

    def model_overrides(self) -> dict:
        return {k: v for k, v in self.model.items() if k not in DATA_DERIVED_MODEL_FIELDS}


_SECTIONS = {"world": WorldConfig, "train": TrainConfig, "index": IndexConfig, "serve": ServeConfig}
_SEEDED = {"world": ("seed",), "train": ("seed", "init_seed"), "index": ("seed",)}


def _check_types(section: str, cls, raw: dict) -> None:
    defaults = cls()
    for name, value in raw.items():
        ref = getattr(defaults, name)
        if ref is None or value is None:
            continue
        ok = {bool: lambda v: isinstance(v, bool),
              int: lambda v: isinstance(v, int) and not isinstance(v, bool),
              float: lambda v: isinstance(v, (int, float)) and not isinstance(v, bool),
              str: lambda v: isinstance(v, str),
              tuple: lambda v: isinstance(v, (list, tuple))}.get(type(ref), lambda v: True)(value)
        if not ok:
            raise ConfigError(f"{section}.{name}", f"expected {type(ref).__name__}, got {value!r}")


def _build(section: str, cls, raw: Any):
    if not isinstance(raw, dict):
        raise ConfigError(section, "must be a mapping")
    known = {f.name for f in fields(cls)}
    for name in sorted(raw):
        if name not in known:
            raise ConfigError(f"{section}.{name}", "unknown field")
    _check_types(section, cls, raw)
    try:
        return cls(**raw)
    except ValueError as exc:
        # validators name the offending fields after the colon
        msg = str(exc)
        names = msg.split(":", 1)[1].strip() if ":" in msg else "?"
        raise ConfigError(f"{section}.{names.split(',')[0].strip()}", msg) from exc


def parse_override(text: str) -> tuple[list[str], Any]:
    if "=" not in text:
        raise ConfigError(text, "override must look like section.field=value")
    key, value = text.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(text, "empty override key")
    return path, yaml.safe_load(value) if value.strip() else ""


def load_raw(path: str | Path | None) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    raw = json.loads(text) if str(path).endswith(".json") else yaml.safe_load(text)
    if raw is None:
        return {}
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config file must hold a mapping")
    return raw


def build_run_config(raw: dict, overrides: list[str] = ()) -> RunConfig:
    raw = json.loads(json.dumps(raw))  # deep copy
    for text in overrides:
        path, value = parse_override(text)
        node = raw
        for part in path[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(".".join(path), "parent is not a section")
        node[path[-1]] = value
    unknown = set(raw) - {"seed", "model", *_SECTIONS}
    if unknown:
        raise ConfigError(sorted(unknown)[0], "unknown field")
    if "seed" not in raw:
        raise ConfigError("seed", "missing required field (seeds are never taken from the clock)")
    seed = raw["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigError("seed", f"expected a non-negative integer, got {seed!r}")
    built = {}
    for section, cls in _SECTIONS.items():
        body = dict(raw.get(section) or {})
        for name in _SEEDED.get(section, ()):
            body.setdefault(name, seed)
        built[section] = _build(section, cls, body)
    model = dict(raw.get("model") or {})
    if not isinstance(model, dict):
        raise ConfigError("model", "must be a mapping")
    probe = {k: v for k, v in model.items() if k not in DATA_DERIVED_MODEL_FIELDS}
    _build("model", ModelConfig, probe)
    rc = RunConfig(seed=seed, model=model, **built)
    if rc.serve.transport not in ("stdio", "tcp", "http"):
        raise ConfigError("serve.transport", f"expected stdio, tcp or http, got {rc.serve.transport!r}")
    if rc.serve.mode not in ("exact", "approx"):
        raise ConfigError("serve.mode", f"expected exact or approx, got {rc.serve.mode!r}")
    return rc


def load_run_config(path: str | Path | None, overrides: list[str] = ()) -> RunConfig:
    return build_run_config(load_raw(path), overrides)
