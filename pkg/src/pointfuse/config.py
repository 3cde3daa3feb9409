"""Flat ``key=value`` configuration files and overrides for nested dataclass configs.

Format: one ``key = value`` per line; ``#`` starts a comment. Keys are dotted
paths into the experiment config, e.g.::

    steps = 300
    model.lr = 0.001
    model.fusion = ungated
    scene.n_distractors = 1, 3
    model.bins.bin_size = 0.5

Values are converted to the type of the field they replace: ints, floats,
booleans (true/false), strings, and comma-separated tuples.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path
from typing import Any, Iterable


class ConfigError(ValueError):
    pass


def parse_kv(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def load_kv(path) -> dict[str, str]:
    try:
        return parse_kv(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None


def _convert(raw: str, current: Any, key: str) -> Any:
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, tuple):
            parts = [p.strip() for p in raw.split(",") if p.strip()]
            if current and isinstance(current[0], tuple):
                # tuple of pairs: "3:5, 0.3:5"
                return tuple(tuple(float(x) for x in p.split(":")) for p in parts)
            proto = current[0] if current else 0.0
            return tuple(_convert(p, proto, key) for p in parts)
        if current is None or isinstance(current, str):
            return raw
    except ValueError:
        raise ConfigError(f"{key}: cannot interpret {raw!r} as {type(current).__name__}") from None
    raise ConfigError(f"{key}: field of type {type(current).__name__} cannot be set from text")


def apply_overrides(cfg, overrides: dict[str, str]):
    """Return a copy of the (frozen) dataclass ``cfg`` with dotted-key overrides applied."""
    nested: dict[str, dict[str, str]] = {}
    direct: dict[str, Any] = {}
    names = {f.name for f in dataclasses.fields(cfg)}
    for key, raw in overrides.items():
        head, _, rest = key.partition(".")
        if head not in names:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, head)
        if rest:
            if not dataclasses.is_dataclass(current):
                raise ConfigError(f"unknown config key {key!r}")
            nested.setdefault(head, {})[rest] = raw
        else:
            if dataclasses.is_dataclass(current):
                raise ConfigError(f"{key!r} is a section; set one of its fields instead")
            direct[head] = _convert(raw, current, key)
    for head, sub in nested.items():
        direct[head] = apply_overrides(getattr(cfg, head), sub)
    try:
        return dataclasses.replace(cfg, **direct)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def parse_sets(items: Iterable[str]) -> dict[str, str]:
    """``--set key=value`` arguments."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def flatten(cfg, prefix: str = "") -> dict[str, Any]:
    """Dotted-key view of a nested dataclass (for logging the resolved config)."""
    out = {}
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, f"{prefix}{f.name}."))
        else:
            out[f"{prefix}{f.name}"] = list(v) if isinstance(v, tuple) else v
    return out
