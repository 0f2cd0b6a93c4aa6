"""Loading dataclass configs from flat JSON key/value documents."""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Any, Mapping, TypeVar

T = TypeVar("T")


def config_from_mapping(cls: type[T], mapping: Mapping[str, Any]) -> T:
    """Build ``cls`` from ``mapping``, rejecting keys the dataclass does not declare."""
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(mapping) - set(names))
    if unknown:
        raise ValueError(f"unknown config keys for {cls.__name__}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in mapping.items():
        # JSON has no tuples; tuple-typed defaults get their lists converted back
        default = names[key].default
        if isinstance(default, tuple) and isinstance(value, list):
            value = tuple(value)
        kwargs[key] = value
    return cls(**kwargs)


def load_config(cls: type[T], path: str | Path | None) -> T:
    if path is None:
        return cls()
    with open(path, encoding="utf-8") as fh:
        mapping = json.load(fh)
    if not isinstance(mapping, dict):
        raise ValueError(f"{path}: config document must be a key/value object")
    return config_from_mapping(cls, mapping)


def config_to_dict(config: Any) -> dict[str, Any]:
    out = {}
    for f in dataclasses.fields(config):
        value = getattr(config, f.name)
        out[f.name] = list(value) if isinstance(value, tuple) else value
    return out
