"""Flat ``key = value`` config files and typed overrides onto dataclasses."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path
from typing import Any, TypeVar

T = TypeVar("T")


class ConfigError(ValueError):
    pass


def parse_flat_config(text: str, where: str = "<config>") -> dict[str, str]:
    """``key = value`` lines; ``#`` starts a comment; later keys win."""
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{where}:{n}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{where}:{n}: empty key")
        out[key] = value
    return out


def read_flat_config(path: str | Path) -> dict[str, str]:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file {p} not found")
    return parse_flat_config(p.read_text(encoding="utf-8"), str(p))


def coerce(current: Any, raw: str, key: str) -> Any:
    """Parse ``raw`` into the type of ``current``."""
    try:
        if isinstance(current, bool):
            low = raw.strip().lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float) or current is None:
            return float(raw)
        if isinstance(current, tuple):
            return tuple(float(x) for x in raw.split(","))
        return raw.strip()
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def apply_overrides(obj: T, values: dict[str, str], aliases: dict[str, str] | None = None) -> tuple[T, dict[str, str]]:
    """Copy of dataclass ``obj`` with matching keys replaced; unmatched keys are returned."""
    aliases = aliases or {}
    names = {f.name for f in dataclasses.fields(obj)}
    changes: dict[str, Any] = {}
    rest: dict[str, str] = {}
    for key, raw in values.items():
        field = aliases.get(key, key)
        if field in names:
            changes[field] = coerce(getattr(obj, field), raw, key)
        else:
            rest[key] = raw
    return dataclasses.replace(obj, **changes), rest


def config_hash(*configs: Any) -> str:
    blob = json.dumps([dataclasses.asdict(c) for c in configs], sort_keys=True)
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


def format_flat_config(*configs: Any) -> str:
    lines = []
    for c in configs:
        lines.append(f"# {type(c).__name__}")
        for f in dataclasses.fields(c):
            v = getattr(c, f.name)
            if isinstance(v, tuple):
                v = ",".join(repr(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
