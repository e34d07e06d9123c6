"""Sectioned key=value run configuration with an include directive.

An [include] section lists preset files merged before the including file,
in key order; values from the including file win. Keys are case-sensitive
and values are plain strings until a typed accessor converts them.
"""

from __future__ import annotations

import configparser
from pathlib import Path

__all__ = ["ConfigError", "RunConfig", "read_config"]

_MAX_INCLUDE_DEPTH = 8


class ConfigError(ValueError):
    """Invalid or incomplete run configuration."""


def _parse_file(path: Path) -> configparser.ConfigParser:
    parser = configparser.ConfigParser(delimiters=("=",), interpolation=None,
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from exc
    return parser


def _load(path: Path, depth: int) -> dict[str, dict[str, str]]:
    if depth > _MAX_INCLUDE_DEPTH:
        raise ConfigError(f"include depth exceeds {_MAX_INCLUDE_DEPTH} at {path}")
    parser = _parse_file(path)
    merged: dict[str, dict[str, str]] = {}
    if parser.has_section("include"):
        for key in sorted(parser.options("include")):
            target = (path.parent / parser.get("include", key)).resolve()
            if not target.exists():
                raise ConfigError(f"{path}: included file {target} does not exist")
            for section, values in _load(target, depth + 1).items():
                merged.setdefault(section, {}).update(values)
    for section in parser.sections():
        if section == "include":
            continue
        merged.setdefault(section, {})
        for key in parser.options(section):
            merged[section][key] = parser.get(section, key)
    return merged


class RunConfig:
    """Typed accessors over merged config sections."""

    def __init__(self, sections: dict[str, dict[str, str]], source: str = "<memory>"):
        self.sections = sections
        self.source = source

    def has(self, section: str, key: str) -> bool:
        return key in self.sections.get(section, {})

    def get(self, section: str, key: str, default=None) -> str | None:
        return self.sections.get(section, {}).get(key, default)

    def require(self, section: str, key: str) -> str:
        value = self.get(section, key)
        if value is None:
            raise ConfigError(f"{self.source}: missing required key [{section}] {key}")
        return value

    def _typed(self, section: str, key: str, cast, default):
        raw = self.get(section, key)
        if raw is None:
            if default is None:
                raise ConfigError(f"{self.source}: missing required key [{section}] {key}")
            return default
        try:
            return cast(raw)
        except ValueError as exc:
            raise ConfigError(
                f"{self.source}: bad value for [{section}] {key}: {raw!r} ({exc})"
            ) from exc

    def get_int(self, section: str, key: str, default: int | None = None) -> int:
        return self._typed(section, key, int, default)

    def get_float(self, section: str, key: str, default: float | None = None) -> float:
        return self._typed(section, key, float, default)

    def get_bool(self, section: str, key: str, default: bool | None = None) -> bool:
        def cast(raw: str) -> bool:
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")

        return self._typed(section, key, cast, default)

    def get_int_list(self, section: str, key: str,
                     default: tuple[int, ...] | None = None) -> tuple[int, ...]:
        def cast(raw: str) -> tuple[int, ...]:
            parts = [p for p in raw.replace(",", " ").split() if p]
            if not parts:
                raise ValueError("empty list")
            return tuple(int(p) for p in parts)

        return self._typed(section, key, cast, default)

    def snapshot(self) -> str:
        """Canonical text form of the merged config, for manifests."""
        lines = []
        for section in sorted(self.sections):
            lines.append(f"[{section}]")
            for key in sorted(self.sections[section]):
                lines.append(f"{key} = {self.sections[section][key]}")
            lines.append("")
        return "\n".join(lines)


def read_config(path) -> RunConfig:
    """Loads a config file, resolving includes; raises ConfigError on problems."""
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return RunConfig(_load(p.resolve(), 0), source=str(p))
