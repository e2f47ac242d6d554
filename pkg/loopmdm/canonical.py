"""Flat canonical text for nested config dataclasses.

Nested dataclasses flatten to dotted keys (`loop.s_max`) in one JSON
object written with sorted keys, so two configs diff line by line.
An optional nested dataclass that is unset is written as `null`.
"""
from __future__ import annotations
import dataclasses
import json
import typing
from typing import Any, Dict, Type, TypeVar

from .errors import ConfigError

D = TypeVar("D")


def to_flat(obj: Any, prefix: str = "") -> Dict[str, Any]:
    flat: Dict[str, Any] = {}
    for f in dataclasses.fields(obj):
        key = prefix + f.name
        value = getattr(obj, f.name)
        if dataclasses.is_dataclass(value):
            flat.update(to_flat(value, key + "."))
        else:
            flat[key] = value
    return flat


def _unwrap_optional(tp) -> tuple:
    if typing.get_origin(tp) is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def _coerce(key: str, tp, value: Any) -> Any:
    tp, optional = _unwrap_optional(tp)
    if value is None:
        if optional:
            return None
        raise ConfigError(key, "may not be null")
    if tp is bool:
        if isinstance(value, bool):
            return value
    elif tp is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif tp is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    elif tp is str:
        if isinstance(value, str):
            return value
    else:
        return value
    raise ConfigError(key, f"expected {tp.__name__}, got {type(value).__name__} {value!r}")


def from_flat(cls: Type[D], flat: Dict[str, Any], prefix: str = "", base: Any = None) -> D:
    """Build `cls` from dotted keys under `prefix`, starting from `base` (or defaults).

    Keys under `prefix` that name no field raise ConfigError.
    """
    base = base if base is not None else cls()
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    for key in flat:
        if key.startswith(prefix) and key[len(prefix):].split(".")[0] not in names:
            raise ConfigError(key, "unknown configuration key")
    values = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        tp, optional = _unwrap_optional(hints[f.name])
        current = getattr(base, f.name)
        if dataclasses.is_dataclass(tp):
            nested = {k: v for k, v in flat.items() if k.startswith(key + ".")}
            if key in flat and flat[key] is None:
                values[f.name] = None
            elif nested:
                values[f.name] = from_flat(tp, flat, key + ".", current if current is not None else tp())
            else:
                values[f.name] = current
        elif key in flat:
            values[f.name] = _coerce(key, hints[f.name], flat[key])
        else:
            values[f.name] = current
    return cls(**values)


def canonical_json(obj: Any) -> str:
    data = to_flat(obj) if dataclasses.is_dataclass(obj) else obj
    return json.dumps(data, sort_keys=True, indent=2, ensure_ascii=False) + "\n"
