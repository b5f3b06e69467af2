"""Flat ``key = value`` config files and typed coercion onto dataclass fields."""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path

from .errors import ConfigError, ParseError


def parse_config_text(text, source="<config>"):
    """Parse ``key = value`` lines; ``#`` starts a comment, blank lines are skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ParseError(f"{source}:{lineno}: expected key = value", field=f"line {lineno}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ParseError(f"{source}:{lineno}: empty key", field=f"line {lineno}")
        if key in out:
            raise ParseError(f"{source}:{lineno}: duplicate key {key!r}", field=key)
        out[key.replace("-", "_")] = value
    return out


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config_text(text, source=str(path))


def parse_assignments(items):
    """``["a=1", "b=2"]`` from repeated ``--set`` flags."""
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def _bool(text):
    t = text.lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _number(text):
    try:
        return int(text)
    except ValueError:
        return float(text)


def _tuple_of_numbers(text):
    text = text.strip().strip("()[]")
    return tuple(_number(p) for p in text.replace(";", ",").split(",") if p.strip())


def _pairs(text):
    # "20:5,35:5" -> ((20, 5.0), (35, 5.0))
    out = []
    for part in text.replace(";", ",").split(","):
        if not part.strip():
            continue
        e, d = part.split(":")
        out.append((int(e), float(d)))
    return tuple(out)


def coerce(value, default, hint=None):
    """Convert a config string to the type implied by a field default/annotation."""
    if not isinstance(value, str):
        return value
    if value.lower() in ("none", "null", ""):
        return None
    if isinstance(default, bool):
        return _bool(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    if isinstance(default, tuple):
        if ":" in value:
            return _pairs(value)
        return _tuple_of_numbers(value)
    if isinstance(default, str):
        return value
    if hint is not None and "float" in str(hint):
        return float(value)
    if hint is not None and "int" in str(hint):
        return int(value)
    return value


def apply_fields(cls, values, ignore=()):
    """Coerce string ``values`` onto the fields of dataclass ``cls``.

    Returns the coerced dict; unknown keys raise :class:`ConfigError`.
    """
    fields = {f.name: f for f in dataclasses.fields(cls)}
    hints = typing.get_type_hints(cls)
    out = {}
    for key, value in values.items():
        if key in ignore:
            continue
        if key not in fields:
            raise ConfigError(f"unknown {cls.__name__} key {key!r}; valid: {', '.join(sorted(fields))}")
        f = fields[key]
        default = f.default if f.default is not dataclasses.MISSING else None
        try:
            out[key] = coerce(value, default, hints.get(key))
        except ValueError as exc:
            raise ConfigError(f"bad value for {key}: {exc}") from None
    return out
