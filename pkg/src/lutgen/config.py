"""Plain-text ``key=value`` configuration files mapped onto dataclasses."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError


def _coerce(raw: str, tp):
    origin = typing.get_origin(tp)
    if origin is tuple:
        inner = typing.get_args(tp)[0]
        return tuple(_coerce(p.strip(), inner) for p in raw.split(",") if p.strip())
    if tp is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError([f"line {lineno}: expected key=value, got {line!r}"])
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def from_mapping(cls, values: dict[str, str], base=None):
    """Build a ``cls`` instance from string values, reporting every bad key."""
    hints = typing.get_type_hints(cls)
    fields = {f.name for f in dataclasses.fields(cls)}
    problems = []
    updates = {}
    for key, raw in values.items():
        if key not in fields:
            problems.append(f"unknown key {key!r}")
            continue
        try:
            updates[key] = _coerce(raw, hints[key])
        except ValueError as exc:
            problems.append(f"{key}: {exc}")
    if problems:
        raise ConfigError(problems)
    obj = dataclasses.replace(base, **updates) if base is not None else cls(**updates)
    validate = getattr(obj, "validate", None)
    if validate is not None:
        bad = validate()
        if bad:
            raise ConfigError(bad)
    return obj


def load_config(cls, path=None, base=None):
    if path is None:
        return base if base is not None else cls()
    return from_mapping(cls, parse_kv(Path(path).read_text(encoding="utf-8")), base)


def dump_config(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"
