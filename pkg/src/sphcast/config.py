"""Flat ``key = value`` configuration files.

One setting per line, ``#`` starts a comment, blank lines are ignored.
Values are parsed against the dataclass field's default type; tuples are
comma separated (``widths = 16, 24, 32, 48``).
"""

from __future__ import annotations

import dataclasses


class ConfigError(ValueError):
    pass


def parse_text(text: str) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {n}: empty key")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(value: str, default, name: str):
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            items = [v.strip() for v in value.split(",") if v.strip()]
            proto = default[0] if default else ""
            return tuple(_convert(v, proto, name) for v in items)
        if default is None:
            if value.lower() in ("", "none"):
                return None
            try:
                return int(value)
            except ValueError:
                return value
        return value
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {value!r}") from exc


def from_mapping(cls, values: dict[str, str], base=None):
    """Build dataclass ``cls`` from string values; unknown keys are rejected."""
    base = base if base is not None else cls()
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(fields))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    updates = {k: _convert(v, getattr(base, k), k) for k, v in values.items()}
    return dataclasses.replace(base, **updates)


def load(cls, path, overrides: dict[str, str] | None = None):
    with open(path) as fh:
        values = parse_text(fh.read())
    values.update(overrides or {})
    return from_mapping(cls, values)


def dump(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        if isinstance(v, tuple):
            v = ", ".join(str(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
