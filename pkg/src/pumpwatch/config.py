"""Flat ``key=value`` config files mapped onto dataclasses.

Lines starting with ``#`` and blank lines are ignored. Tuples are written
comma-separated. Unknown keys are rejected with the list of valid keys.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, fields, replace
from pathlib import Path
from typing import Any, Iterable, TypeVar

from .errors import ConfigError, UnknownKey

T = TypeVar("T")


def _coerce(kind: str, raw: str, key: str):
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind.startswith("tuple[int"):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        if kind.startswith("tuple[float"):
            return tuple(float(x) for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {kind})") from None
    return raw


def parse_pairs(lines: Iterable[str]) -> dict[str, str]:
    out = {}
    for n, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected key=value, got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = value.strip()
    return out


def apply_pairs(obj: T, pairs: dict[str, str]) -> T:
    kinds = {f.name: str(f.type) for f in fields(obj)}
    unknown = sorted(set(pairs) - set(kinds))
    if unknown:
        raise UnknownKey(unknown, kinds)
    return replace(obj, **{k: _coerce(kinds[k], v, k) for k, v in pairs.items()})


def load(cls: type[T], path: str | Path | None = None, overrides: dict[str, str] | None = None) -> T:
    """Defaults < file < overrides."""
    obj = cls()
    if path is not None:
        obj = apply_pairs(obj, parse_pairs(Path(path).read_text().splitlines()))
    if overrides:
        obj = apply_pairs(obj, overrides)
    return obj


def _fmt(v: Any) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return str(v)


def dump(obj) -> str:
    return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(obj).items())


def digest(obj) -> str:
    return hashlib.sha256(dump(obj).encode()).hexdigest()
