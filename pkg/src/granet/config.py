"""The ``key = value`` configuration dialect.

One setting per line, dotted keys (``model.fine_channels = 64``), ``#``
comments. Each top-level section maps onto a dataclass; values are parsed
according to the dataclass field types. Unknown keys are errors.
"""

from __future__ import annotations

import dataclasses
import typing
from pathlib import Path
from typing import Any, Union

__all__ = ["ConfigError", "parse_text", "read_file", "build", "to_lines", "format_value"]


class ConfigError(ValueError):
    """Bad configuration text; ``key`` names the offending setting when known."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}", key)
        out[key] = value.strip()
    return out


def read_file(path: Union[str, Path]) -> dict[str, str]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_text(text, str(path))


def _convert(tp: Any, text: str, key: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is Union:
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("", "none"):
            return None
        return _convert(inner[0], text, key)
    if origin is tuple:
        items = [t.strip() for t in text.split(",") if t.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_convert(args[0], t, key) for t in items)
        if len(items) != len(args):
            raise ConfigError(f"{key}: expected {len(args)} comma-separated values, got {text!r}", key)
        return tuple(_convert(a, t, key) for a, t in zip(args, items))
    try:
        if tp is bool:
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if tp in (int, float, str):
            return tp(text)
        if hasattr(tp, "parse"):
            return tp.parse(text)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {getattr(tp, '__name__', tp)}", key) from exc
    raise ConfigError(f"{key}: unsupported field type {tp}", key)


def build(cls, section: str, values: dict[str, str], base=None):
    """Instantiate dataclass ``cls`` from ``section.*`` entries of ``values``."""
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    kwargs = {}
    for key, text in values.items():
        sec, _, name = key.partition(".")
        if sec != section:
            continue
        if name not in names:
            raise ConfigError(f"unknown config key {key!r}", key)
        kwargs[name] = _convert(hints[name], text, key)
    try:
        if base is not None:
            return dataclasses.replace(base, **kwargs)
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid [{section}] configuration: {exc}") from exc


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(format_value(v) for v in value)
    if value is None:
        return "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def to_lines(obj, section: str) -> list[str]:
    return [
        f"{section}.{f.name} = {format_value(getattr(obj, f.name))}"
        for f in dataclasses.fields(obj)
        if f.init
    ]
