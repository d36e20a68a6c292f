"""Flat ``key = value`` config files.

Blank lines and ``#`` comments are ignored; keys are case-sensitive; a key
may appear only once. Vector values are whitespace-separated numbers.
"""

from __future__ import annotations

import configparser
from pathlib import Path
from typing import Mapping

from .errors import ConfigError

_SECTION = "root"


def parse_kv(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",), delimiters=("=",), strict=True
    )
    parser.optionxform = str
    try:
        parser.read_string(f"[{_SECTION}]\n{text}")
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from None
    if len(parser.sections()) != 1:
        raise ConfigError("config files must not contain [section] headers")
    return dict(parser[_SECTION])


def read_kv(path: str | Path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_kv(text)


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)) or hasattr(v, "tolist"):
        items = v.tolist() if hasattr(v, "tolist") else v
        return " ".join(format_value(float(x) if not isinstance(x, int) else x) for x in items)
    return str(v)


def format_kv(pairs: Mapping[str, object], header: str | None = None) -> str:
    lines = [f"# {line}" for line in header.splitlines()] if header else []
    lines += [f"{k} = {format_value(v)}" for k, v in pairs.items()]
    return "\n".join(lines) + "\n"


def to_floats(value: str, n: int | None = None, key: str = "?") -> tuple[float, ...]:
    try:
        out = tuple(float(x) for x in value.split())
    except ValueError:
        raise ConfigError(f"{key}: expected numbers, got {value!r}") from None
    if n is not None and len(out) != n:
        raise ConfigError(f"{key}: expected {n} numbers, got {len(out)}")
    return out


def to_bool(value: str, key: str = "?") -> bool:
    v = value.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {value!r}")


def to_int(value: str, key: str = "?") -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"{key}: expected an integer, got {value!r}") from None
