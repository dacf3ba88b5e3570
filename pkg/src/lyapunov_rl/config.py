"""Flat ``key = value`` config files and dataclass coercion.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Lists are comma-separated. A dataclass field may carry ``metadata={"key": ...}``
to use a different name on disk (``lambda`` is a Python keyword).
"""
from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError


def parse_kv(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def read_kv(path) -> dict:
    try:
        return parse_kv(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump_kv(mapping: dict) -> str:
    return "".join(f"{k} = {format_value(v)}\n" for k, v in mapping.items())


def field_key(f: dataclasses.Field) -> str:
    return f.metadata.get("key", f.name)


def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if raw.strip().lower() in ("", "none"):
            return None
        return _coerce(raw, inner[0], key)
    if origin in (list, tuple):
        item = args[0] if args else str
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        vals = [_coerce(p, item, key) for p in parts]
        return tuple(vals) if origin is tuple else vals
    try:
        if tp is bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {tp.__name__}") from exc
    return raw.strip()


def from_kv(cls, mapping: dict, strict: bool = False):
    """Build dataclass ``cls`` from string values; unknown keys are ignored unless ``strict``."""
    hints = typing.get_type_hints(cls)
    kwargs = {}
    known = set()
    for f in dataclasses.fields(cls):
        if not f.init:
            continue
        key = field_key(f)
        known.add(key)
        if key in mapping:
            value = mapping[key]
            kwargs[f.name] = value if not isinstance(value, str) else _coerce(value, hints[f.name], key)
    if strict:
        extra = set(mapping) - known
        if extra:
            raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(extra)}")
    return cls(**kwargs)


def to_kv(obj) -> dict:
    return {field_key(f): getattr(obj, f.name) for f in dataclasses.fields(obj) if f.init}
