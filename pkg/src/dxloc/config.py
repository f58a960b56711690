"""Flat ``key = value`` config files.

Values are parsed as Python literals where possible (numbers, tuples, lists,
booleans), otherwise kept as strings.  ``#`` starts a comment.
"""
from __future__ import annotations

import ast
import dataclasses
from pathlib import Path

from .errors import IoFailure


class ConfigError(ValueError):
    pass


def parse_config_text(text: str) -> dict:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        out[key] = _parse_value(value)
    return out


def _parse_value(value: str):
    low = value.lower()
    if low in ("true", "on", "yes"):
        return True
    if low in ("false", "off", "no"):
        return False
    try:
        return ast.literal_eval(value)
    except (ValueError, SyntaxError):
        return value.strip("\"'")


def read_config(path) -> dict:
    try:
        return parse_config_text(Path(path).read_text())
    except OSError as exc:
        raise IoFailure(str(exc)) from exc


def apply_overrides(obj, values: dict, prefix: str = ""):
    """New dataclass instance with matching keys replaced.  Keys of nested
    dataclass fields are written ``field.sub`` or just ``sub`` when unambiguous."""
    changes = {}
    for f in dataclasses.fields(obj):
        cur = getattr(obj, f.name)
        if dataclasses.is_dataclass(cur):
            changes[f.name] = apply_overrides(cur, values, prefix + f.name + ".")
            continue
        for key in (prefix + f.name, f.name):
            if key in values:
                v = values[key]
                if isinstance(cur, tuple) and isinstance(v, list):
                    v = tuple(tuple(x) if isinstance(x, list) else x for x in v)
                elif isinstance(cur, float) and isinstance(v, int):
                    v = float(v)
                changes[f.name] = v
                break
    return dataclasses.replace(obj, **changes)


def known_keys(obj, prefix: str = "") -> set[str]:
    keys = set()
    for f in dataclasses.fields(obj):
        cur = getattr(obj, f.name)
        if dataclasses.is_dataclass(cur):
            keys |= known_keys(cur, prefix + f.name + ".")
            keys |= known_keys(cur)
        else:
            keys.add(prefix + f.name)
    return keys
