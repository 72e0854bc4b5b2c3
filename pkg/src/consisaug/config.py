"""Plain-text config files and the defaults < file < flags merge."""

from __future__ import annotations

import dataclasses
import json
import typing
from pathlib import Path

from .errors import ConfigError, IoError


def parse_config_file(path) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment, blank lines are skipped.

    A JSON object (such as a run's config.json snapshot) is accepted too.
    """
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise IoError(f"cannot read config file {path}: {exc}") from exc
    if text.lstrip().startswith("{"):
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return {k.replace("-", "_"): str(v).lower() if isinstance(v, bool) else str(v) for k, v in obj.items()}
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _coerce(value: str, kind, key: str):
    try:
        if kind is bool:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(value)
        if kind is float:
            return float(value)
        return value
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from None


def merge(cls, file_values: dict[str, str] | None = None, flags: dict | None = None):
    """Build ``cls`` from its defaults, then file values, then non-None flags."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for key, raw in (file_values or {}).items():
        if key not in names:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(raw, hints[key], key)
    for key, v in (flags or {}).items():
        if v is None:
            continue
        if key not in names:
            raise ConfigError(f"unknown option {key!r}")
        values[key] = v
    try:
        return cls(**values)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
