"""Flat ``key=value`` run configs.

One setting per line, ``#`` starts a comment. Each command has a fixed key
set with typed defaults; anything else is rejected so a typo cannot be
silently ignored.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

from dsc.trainer import TrainConfig


class ConfigError(ValueError):
    pass


_COMMON = {"seed": 42, "seeds": ""}

_TRAIN = {f.name: f.default for f in dataclasses.fields(TrainConfig)}

DEFAULTS: dict[str, dict[str, object]] = {
    "verify": {**_COMMON, "n_configs": 50, "tokens": 10000, "inject_fault": "none"},
    "gradcheck": {
        **_COMMON, "h": 1e-5, "threshold": 1e-6, "instances": 3,
        "d": 6, "M": 10, "K": 3, "batch": 4, "router_std": 1.0,
    },
    "train": {**_COMMON, **_TRAIN, "steps": 1500},
    "solve": {
        **_COMMON, "d_model": 384, "layers": 6, "heads": 6, "vocab": 50304, "seq_len": 256,
        "target_total": 35.0e6, "target_active": 28.0e6, "N": 5, "top_k": 2, "K": 4,
    },
    "bench": {
        **_COMMON, "d": 384, "d_ffn": 2611, "N": 5, "d_expert": 545, "top_k": 2,
        "M": 1523, "K": 4, "d_base": 327, "molora_M": 16, "molora_r": 95, "molora_K": 4,
        "dtype_bytes": 4, "timing": 0, "batch": 16, "repeats": 30,
    },
}


def parse_text(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {n}: expected key=value, got {raw!r}")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def _coerce(key: str, value, default):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            if value.lower() in ("1", "true", "yes"):
                return True
            if value.lower() in ("0", "false", "no"):
                return False
            raise ValueError(value)
        if isinstance(default, int):
            return int(float(value)) if "e" in value.lower() else int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return value


def resolve(command: str, file_values: dict[str, str], overrides: dict[str, object]) -> dict[str, object]:
    """Defaults <- config file <- command-line overrides, with type coercion."""
    defaults = DEFAULTS[command]
    unknown = sorted(set(file_values) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key(s) for {command}: {', '.join(unknown)}")
    resolved = dict(defaults)
    for k, v in {**file_values, **overrides}.items():
        resolved[k] = _coerce(k, v, defaults[k])
    return resolved


def load(command: str, path: str | Path | None, overrides: dict[str, object]) -> dict[str, object]:
    values = {}
    if path is not None:
        try:
            values = parse_text(Path(path).read_text())
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return resolve(command, values, overrides)


def parse_seeds(resolved: dict[str, object]) -> list[int]:
    raw = str(resolved.get("seeds", "")).strip()
    if not raw:
        return [int(resolved["seed"])]
    try:
        return [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"seeds: expected comma-separated integers, got {raw!r}") from None


def snapshot(command: str, resolved: dict[str, object]) -> str:
    lines = [f"# resolved config for `{command}`"]
    lines += [f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}" for k, v in sorted(resolved.items())]
    return "\n".join(lines) + "\n"
