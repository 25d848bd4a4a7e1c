"""Flat ``key = value`` run-config files with dotted keys mapped onto ``TrainConfig``.

    # comment
    mode = leading
    propagation.alpha = 0.1
    encoder.activation = tanh

Later duplicate keys override earlier ones; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import fields, is_dataclass, replace
from pathlib import Path
from typing import Any

from .trainer import TrainConfig

SECTIONS = ("encoder", "propagation", "optim", "downstream")


class ConfigError(ValueError):
    pass


def _defaults() -> dict[str, Any]:
    base = TrainConfig()
    out = {}
    for f in fields(base):
        value = getattr(base, f.name)
        if is_dataclass(value):
            for sub in fields(value):
                out[f"{f.name}.{sub.name}"] = getattr(value, sub.name)
        else:
            out[f.name] = value
    return out


DEFAULTS = _defaults()


def parse_value(text: str) -> Any:
    text = text.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for kind in (int, float):
        try:
            return kind(text)
        except ValueError:
            pass
    return text


def _coerce(key: str, value: Any, where: str) -> Any:
    default = DEFAULTS[key]
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
    elif isinstance(default, int):
        if isinstance(value, int) and not isinstance(value, bool):
            return value
    elif isinstance(default, float):
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
    else:
        return str(value)
    raise ConfigError(f"{where}: {key} expects {type(default).__name__}, got {value!r}")


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse config text into ``{dotted key: typed value}``."""
    out: dict[str, Any] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{where}: unknown key {key!r}")
        out[key] = _coerce(key, parse_value(value), where)
    return out


def apply(cfg: TrainConfig, values: dict[str, Any]) -> TrainConfig:
    top = {k: v for k, v in values.items() if "." not in k}
    nested = {}
    for key, v in values.items():
        if "." in key:
            section, name = key.split(".", 1)
            nested.setdefault(section, {})[name] = v
    try:
        for section, kv in nested.items():
            top[section] = replace(getattr(cfg, section), **kv)
        return replace(cfg, **top)
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from e


def load_config(path: str | Path, base: TrainConfig | None = None) -> TrainConfig:
    path = Path(path)
    values = parse_text(path.read_text(encoding="utf-8"), str(path))
    return apply(base or TrainConfig(), values)


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            lines += [f"{f.name}.{s.name} = {_fmt(getattr(value, s.name))}" for s in fields(value)]
        else:
            lines.append(f"{f.name} = {_fmt(value)}")
    return "\n".join(lines) + "\n"


def _fmt(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)
