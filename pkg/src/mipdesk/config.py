"""Flat ``key = value`` configuration files with command-line overrides.

Lines starting with ``#`` are comments; inline ``# ...`` after a value is
stripped too. Keys must name a field of the target dataclass; anything else
is rejected with the closest valid names.
"""

import difflib
import typing
from dataclasses import fields, is_dataclass


class ConfigError(ValueError):
    pass


def parse_lines(lines, source="<config>"):
    out = {}
    for lineno, raw in enumerate(lines, 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out[key] = value
    return out


def parse_file(path):
    with open(path) as f:
        return parse_lines(f, source=str(path))


def parse_overrides(items):
    return parse_lines(items, source="<command line>")


def _coerce(value, typ, key):
    if typing.get_origin(typ) is typing.Union:
        typ = next(t for t in typing.get_args(typ) if t is not type(None))
    if isinstance(value, typ) and not (typ is int and isinstance(value, bool)):
        return value
    text = str(value).strip()
    try:
        if typ is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ is int:
            return int(text)
        if typ is float:
            return float(text)
        if typ is str:
            return text
    except ValueError:
        pass
    raise ConfigError(f"{key}: cannot read {text!r} as {typ.__name__}")


def field_types(cls):
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def check_keys(values, allowed):
    allowed = list(allowed)
    for key in values:
        if key not in allowed:
            close = difflib.get_close_matches(key, allowed, n=3)
            hint = f"; did you mean {', '.join(close)}?" if close else ""
            raise ConfigError(f"unknown config key {key!r}{hint}")


def build(cls, values, base=None):
    """Instance of dataclass ``cls`` from string values layered over ``base``."""
    if not is_dataclass(cls):
        raise TypeError(cls)
    types = field_types(cls)
    check_keys(values, types)
    kwargs = {} if base is None else {f.name: getattr(base, f.name) for f in fields(cls)}
    for key, value in values.items():
        kwargs[key] = _coerce(value, types[key], key)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def dump(obj):
    """Config text that :func:`parse_lines` reads back to the same values."""
    return "".join(f"{f.name} = {getattr(obj, f.name)}\n" for f in fields(obj))
