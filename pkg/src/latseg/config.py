"""Flat key=value run configuration files.

One option per line, `#` comments, no sections. Every run echoes its fully
resolved configuration back out (config.resolved), so two experiment cells
can always be diffed textually; that is why values here stay strings until
a typed accessor pulls them out.
"""

from __future__ import annotations

from pathlib import Path
from typing import Dict, Iterable, Mapping

from .errors import ConfigError

_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    result: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in result:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        result[key] = value
    return result


def parse_config_file(path) -> Dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def format_config(mapping: Mapping[str, object]) -> str:
    lines = []
    for key in sorted(mapping):
        value = mapping[key]
        if isinstance(value, bool):
            value = "true" if value else "false"
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


def reject_unknown_keys(mapping: Mapping[str, str], known: Iterable[str]) -> None:
    unknown = sorted(set(mapping) - set(known))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")


def get_str(mapping: Mapping[str, str], key: str, default: str) -> str:
    return mapping.get(key, default)


def get_int(mapping: Mapping[str, str], key: str, default: int) -> int:
    if key not in mapping:
        return default
    try:
        return int(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"{key} must be an integer, got {mapping[key]!r}") from exc


def get_float(mapping: Mapping[str, str], key: str, default: float) -> float:
    if key not in mapping:
        return default
    try:
        return float(mapping[key])
    except ValueError as exc:
        raise ConfigError(f"{key} must be a number, got {mapping[key]!r}") from exc


def get_bool(mapping: Mapping[str, str], key: str, default: bool) -> bool:
    if key not in mapping:
        return default
    value = mapping[key].lower()
    if value in _TRUE:
        return True
    if value in _FALSE:
        return False
    raise ConfigError(f"{key} must be a boolean (true/false), got {mapping[key]!r}")


def get_int_tuple(mapping: Mapping[str, str], key: str, default: tuple) -> tuple:
    if key not in mapping:
        return default
    parts = [p.strip() for p in mapping[key].split(",") if p.strip()]
    try:
        return tuple(int(p) for p in parts)
    except ValueError as exc:
        raise ConfigError(
            f"{key} must be comma-separated integers, got {mapping[key]!r}"
        ) from exc
