"""``key = value`` configuration files mapped onto dataclasses."""
from __future__ import annotations

import dataclasses
import typing

from .errors import ArgumentError


def parse_kv(text: str) -> dict[str, str]:
    """Parse UTF-8 ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ArgumentError(f"line {lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ArgumentError(f"line {lineno}: empty key")
        if key in out:
            raise ArgumentError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def format_kv(mapping: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in mapping.items())


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (tuple, list)):
        return ",".join(format_value(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def convert(value: str, hint, key: str = "value"):
    """Convert a string according to a dataclass field type hint."""
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin is typing.Union or (origin is not None and type(None) in args):
            inner = [a for a in args if a is not type(None)]
            if value.lower() in ("none", ""):
                return None
            return convert(value, inner[0], key)
        if origin in (tuple, list):
            elem = args[0] if args else str
            items = [s.strip() for s in value.split(",") if s.strip()]
            return tuple(convert(s, elem, key) for s in items)
        if hint is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
        return value
    except ValueError:
        raise ArgumentError(f"{key}: cannot interpret {value!r} as {getattr(hint, '__name__', hint)}") from None


def field_hints(cls) -> dict:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls) if not f.name.startswith("_")}


def from_kv(cls, mapping: dict, base=None):
    """Build (or update ``base`` of) dataclass ``cls`` from string values; unknown keys are errors."""
    hints = field_hints(cls)
    unknown = sorted(set(mapping) - set(hints))
    if unknown:
        raise ArgumentError(f"unknown {cls.__name__} keys: {', '.join(unknown)}")
    values = {k: convert(v, hints[k], k) if isinstance(v, str) else v for k, v in mapping.items()}
    if base is None:
        return cls(**values)
    return dataclasses.replace(base, **values)
