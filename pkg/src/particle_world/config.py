"""Flat ``key = value`` configuration files with ``#`` comments."""

from __future__ import annotations

import configparser
import dataclasses
from pathlib import Path

from .errors import InvalidInputError

_SECTION = "config"


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    parser = configparser.ConfigParser(
        delimiters=("=",), comment_prefixes=("#",), inline_comment_prefixes=("#",), interpolation=None
    )
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n" + text, source=source)
    except configparser.Error as exc:
        raise InvalidInputError(f"{source}: malformed config: {exc}") from exc
    if parser.sections() != [_SECTION]:
        raise InvalidInputError(f"{source}: section headers are not allowed in a flat config")
    return dict(parser[_SECTION])


def parse_kv_file(path) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise FileNotFoundError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_kv_text(text, str(path))


def _floats(value: str) -> tuple:
    """Comma-separated numbers, e.g. ``-0.01, -0.01, 0``."""
    return tuple(float(v) for v in value.split(","))


_NAMED = {"int": int, "float": float, "bool": bool, "str": str, "tuple": _floats}


def _coerce(value: str, target, key: str):
    try:
        if target is bool:
            low = value.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return target(value)
    except ValueError as exc:
        raise InvalidInputError(f"config key {key!r}: cannot parse {value!r} as {target.__name__.strip('_')}") from exc


def dataclass_from_kv(cls, values: dict[str, str], prefix: str = ""):
    """Build dataclass ``cls`` from string values; unknown keys are left to the caller."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        if key in values:
            kind = f.type if isinstance(f.type, type) else _NAMED.get(str(f.type).split(" |")[0])
            if kind is None:
                raise InvalidInputError(f"config key {key!r} cannot be set from a config file")
            kwargs[f.name] = _coerce(values[key], kind, key)
    return cls(**kwargs)
