"""Plain-text ``key = value`` config files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def parse_kv(text: str) -> dict[str, str]:
    """``key = value`` per line; ``#`` starts a comment; later keys win."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value, got {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_kv(path) -> dict[str, str]:
    try:
        return parse_kv(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def format_kv(mapping: dict) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in mapping.items())


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def coerce(value, tp):
    """Convert a string (or already-typed value) to the annotated field type."""
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if isinstance(value, str) and value.lower() in ("", "none"):
            return None
        return coerce(value, args[0])
    if origin is tuple:
        if isinstance(value, str):
            value = [x.strip() for x in value.split(",") if x.strip()]
        return tuple(value)
    if tp is bool:
        if isinstance(value, bool):
            return value
        s = str(value).lower()
        if s in _TRUE:
            return True
        if s in _FALSE:
            return False
        raise ConfigError(f"not a boolean: {value!r}")
    try:
        return tp(value)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"cannot convert {value!r} to {tp.__name__}") from exc


def apply(obj, mapping: dict, strict: bool = True):
    """Return a copy of dataclass ``obj`` with fields replaced from ``mapping``."""
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    for k, v in mapping.items():
        key = k.replace("-", "_")
        if key not in names:
            if strict:
                raise ConfigError(f"unknown config key {k!r}")
            continue
        changes[key] = coerce(v, hints[key])
    return dataclasses.replace(obj, **changes)
