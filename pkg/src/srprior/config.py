"""Flat ``key = value`` run configuration.

One assignment per line; ``#`` starts a comment; values are Python
literals (numbers, booleans, strings, lists) with bare words accepted as
strings::

    model = fixed
    train.epochs = 5
    train.lr_halving_epochs = [1, 2, 3, 4]
    loss.lambda = 0.1
"""
from __future__ import annotations

import ast
from pathlib import Path

__all__ = ["ConfigError", "parse_config", "read_config", "format_config"]


class ConfigError(ValueError):
    pass


def _value(raw: str):
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        low = raw.lower()
        if low in ("true", "false"):
            return low == "true"
        return raw


def parse_config(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = (p.strip() for p in line.split("=", 1))
        if not key or not raw:
            raise ConfigError(f"line {lineno}: empty key or value")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = _value(raw)
    return out


def read_config(path) -> dict:
    try:
        return parse_config(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def format_config(cfg: dict) -> str:
    return "".join(f"{k} = {v!r}\n" for k, v in cfg.items())
