"""Flat ``key=value`` text used by config files and checkpoint headers."""

from __future__ import annotations

import dataclasses
import types
import typing
from typing import Any, Mapping

from .errors import ConfigError


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key=value`` lines; blank lines and ``#`` comments are skipped."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        out[key] = value.strip()
    return out


def format_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_kv(items: Mapping[str, Any]) -> str:
    return "".join(f"{k}={format_value(v)}\n" for k, v in items.items())


def _base_type(tp):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        return args[0], True
    return tp, False


def coerce(raw: str, tp, key: str = "?"):
    base, optional = _base_type(tp)
    if optional and raw == "":
        return None
    try:
        if base is bool:
            lowered = raw.lower()
            if lowered not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return lowered in ("true", "1", "yes")
        if base is int:
            return int(raw, 0)
        if base is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {getattr(base, '__name__', base)}") from None


def build_dataclass(cls, values: Mapping[str, str], *, strict: bool = True):
    """Instantiate ``cls`` from string values, converting by field annotation."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    if strict:
        unknown = sorted(set(values) - names)
        if unknown:
            raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    kwargs = {k: coerce(v, hints[k], k) for k, v in values.items() if k in names}
    return cls(**kwargs)
