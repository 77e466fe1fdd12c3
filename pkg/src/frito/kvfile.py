"""Flat ``key=value`` text used for configs, manifests and metrics logs."""

from __future__ import annotations

import os


def parse_kv(text: str) -> dict[str, str]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        out[key.strip()] = value.strip()
    return out


def format_kv(items: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in items.items())


def read_kv(path: str | os.PathLike) -> dict[str, str]:
    with open(path, encoding="utf-8") as f:
        return parse_kv(f.read())


def write_kv(path: str | os.PathLike, items: dict) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(format_kv(items))


def record(**fields) -> str:
    """One log line of space separated ``key=value`` pairs, floats in repr form."""
    return " ".join(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in fields.items())


def parse_record(line: str) -> dict[str, str]:
    return dict(part.split("=", 1) for part in line.split())
