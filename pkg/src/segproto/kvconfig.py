"""Plain ``key = value`` config files mapped onto (nested) dataclasses.

Nested sections use dotted keys, e.g. ``augment.voxel_size = 0.02``.
Blank lines and ``#`` comments are ignored.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from pathlib import Path

from .errors import ConfigError, ParseError


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}: line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError(f"{source}: line {lineno}: empty key")
        out[key] = value
    return out


def _coerce(value: str, typ, key: str):
    origin = typing.get_origin(typ)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(typ) if a is not type(None)]
        if value.lower() in ("none", ""):
            return None
        typ = args[0]
    try:
        if typ is bool:
            low = value.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if typ is int:
            return int(value)
        if typ is float:
            return float(value)
        if typ is str:
            return value
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {typ.__name__}") from None
    raise ConfigError(f"{key}: unsupported field type {typ!r}")


def apply_kv(obj, values: dict[str, str], prefix: str = ""):
    """Return a copy of dataclass ``obj`` with ``values`` applied."""
    hints = typing.get_type_hints(type(obj))
    fields = {f.name for f in dataclasses.fields(obj)}
    changes = {}
    nested: dict[str, dict[str, str]] = {}
    for key, value in values.items():
        head, _, rest = key.partition(".")
        if head not in fields:
            raise ConfigError(f"unknown config key {prefix + key!r}")
        if rest:
            nested.setdefault(head, {})[rest] = value
        elif dataclasses.is_dataclass(getattr(obj, head)):
            raise ConfigError(f"{prefix + key!r} is a section, not a value")
        else:
            changes[head] = _coerce(value, hints[head], prefix + key)
    for head, sub in nested.items():
        changes[head] = apply_kv(getattr(obj, head), sub, prefix + head + ".")
    return dataclasses.replace(obj, **changes)


def to_kv(obj, prefix: str = "") -> list[str]:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if dataclasses.is_dataclass(v):
            lines += to_kv(v, prefix + f.name + ".")
        else:
            lines.append(f"{prefix}{f.name} = {v!r}" if isinstance(v, float) else f"{prefix}{f.name} = {v}")
    return lines


def load_kv(cls_or_obj, path):
    base = cls_or_obj() if isinstance(cls_or_obj, type) else cls_or_obj
    return apply_kv(base, parse_kv(Path(path).read_text(), str(path)))
