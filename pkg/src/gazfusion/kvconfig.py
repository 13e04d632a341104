"""Flat ``key=value`` config files mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path
from typing import Any, Iterable, Mapping, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def parse_kv_lines(lines: Iterable[str], source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv(path: str | Path) -> dict[str, str]:
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        return parse_kv_lines(fh, str(path))


def parse_overrides(pairs: Iterable[str]) -> dict[str, str]:
    return parse_kv_lines(pairs, "--set")


def _coerce(value: str, tp: Any, key: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or origin is types.UnionType:
        non_none = [a for a in args if a is not type(None)]
        if value.lower() in ("none", "null", ""):
            return None
        return _coerce(value, non_none[0], key)
    if origin in (tuple, list):
        item_tp = args[0] if args else str
        items = [v.strip() for v in value.split(",") if v.strip()]
        seq = [_coerce(v, item_tp, key) for v in items]
        return tuple(seq) if origin is tuple else seq
    if tp is bool:
        low = value.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: not a boolean: {value!r}")
    try:
        if tp is int:
            return int(value)
        if tp is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {tp.__name__}") from None
    return value


def apply_kv(obj: T, mapping: Mapping[str, str]) -> T:
    """Return a copy of dataclass ``obj`` with string values coerced onto its fields."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for key, value in mapping.items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r} for {type(obj).__name__}")
        changes[key] = _coerce(value, hints[key], key)
    return dataclasses.replace(obj, **changes)


def render_value(value: Any) -> str:
    if isinstance(value, (tuple, list)):
        return ",".join(render_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    return str(value)


def dump_kv(obj: Any) -> str:
    lines = [f"{f.name}={render_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj)]
    return "\n".join(lines) + "\n"


def load_dataclass(cls: type[T], path: str | Path | None = None,
                   overrides: Mapping[str, str] | None = None) -> T:
    obj = cls()
    if path is not None:
        obj = apply_kv(obj, read_kv(path))
    if overrides:
        obj = apply_kv(obj, overrides)
    return obj
