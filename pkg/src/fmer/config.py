"""Training configuration and its key = value text format.

File format: one ``key = value`` per line; ``#`` starts a comment; blank
lines are ignored.  ``none`` means an unset optional value; booleans are
``true``/``false``.  Every ``TrainConfig`` field is addressable.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Any

from .flowpolicy import WEIGHTING_MODES

ENTROPY_POINT_SOURCES = ("interpolant", "simulated")


class ConfigError(ValueError):
    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key


@dataclass
class TrainConfig:
    env_name: str = ""
    seed: int = 0
    total_steps: int = 1_000_000
    warmup_steps: int = 10_000
    batch: int = 256
    gamma: float = 0.99
    polyak: float = 0.005
    actor_lr: float = 3e-4
    actor_lr_final: float = 5e-4
    critic_lr: float = 3e-4
    ode_steps: int = 10
    candidates: int = 8
    tau_advantage: float = 0.5
    target_entropy: float | None = None  # None -> -action_dim
    alpha_init: float = 0.2
    alpha_lr: float = 3e-4
    learn_alpha: bool = True
    probes: int = 1
    weighting_mode: str = "softmax"
    entropy_off_after: int | None = None
    entropy_points: str = "interpolant"
    entropy_smoothing: float = 0.99
    eval_interval: int = 10_000
    n_eval: int = 10
    buffer_capacity: int = 1_000_000
    checkpoint_interval: int | None = 100_000
    log_interval: int = 1_000
    gradient_steps: int = 1
    reward_scale: float = 1.0
    hidden: int = 256
    n_hidden: int = 3

    def validate(self) -> "TrainConfig":
        if not self.env_name:
            raise ConfigError("env_name is required", "env_name")
        for key in ("gamma", "polyak", "actor_lr", "actor_lr_final", "critic_lr",
                    "tau_advantage", "alpha_init", "alpha_lr", "reward_scale"):
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be > 0", key)
        if not self.gamma < 1.0 + 1e-12:
            raise ConfigError("gamma must be <= 1", "gamma")
        if not 0 < self.polyak <= 1:
            raise ConfigError("polyak must be in (0, 1]", "polyak")
        if not 0 <= self.entropy_smoothing < 1:
            raise ConfigError("entropy_smoothing must be in [0, 1)", "entropy_smoothing")
        for key in ("batch", "ode_steps", "candidates", "probes", "eval_interval",
                    "buffer_capacity", "log_interval", "gradient_steps", "hidden", "n_hidden"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key)
        for key in ("total_steps", "warmup_steps", "n_eval", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be >= 0", key)
        if self.checkpoint_interval is not None and self.checkpoint_interval < 1:
            raise ConfigError("checkpoint_interval must be >= 1 or none", "checkpoint_interval")
        if self.entropy_off_after is not None and self.entropy_off_after < 0:
            raise ConfigError("entropy_off_after must be >= 0 or none", "entropy_off_after")
        if self.weighting_mode not in WEIGHTING_MODES:
            raise ConfigError(f"weighting_mode must be one of {WEIGHTING_MODES}", "weighting_mode")
        if self.entropy_points not in ENTROPY_POINT_SOURCES:
            raise ConfigError(f"entropy_points must be one of {ENTROPY_POINT_SOURCES}", "entropy_points")
        return self

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


FIELD_TYPES: dict[str, tuple[type, bool]] = {}
for _f in dataclasses.fields(TrainConfig):
    _t = str(_f.type)
    _optional = "None" in _t
    _base = {"str": str, "int": int, "float": float, "bool": bool}[_t.split("|")[0].strip()]
    FIELD_TYPES[_f.name] = (_base, _optional)

# Desk-scale preset for the 2D multi-goal task: narrower networks and a
# smaller batch so a run fits on one CPU core; everything else is default.
PRESETS: dict[str, dict[str, Any]] = {
    "multigoal-desk": dict(
        env_name="multigoal",
        total_steps=10_000,
        warmup_steps=10_000,
        batch=64,
        hidden=64,
        eval_interval=2_000,
        n_eval=10,
        log_interval=100,
        checkpoint_interval=5_000,
        buffer_capacity=100_000,
    ),
}


def parse_value(key: str, text: str):
    if key not in FIELD_TYPES:
        raise ConfigError(f"unknown config key {key!r}", key)
    base, optional = FIELD_TYPES[key]
    raw = text.strip()
    if optional and raw.lower() in ("none", "null", ""):
        return None
    try:
        if base is bool:
            low = raw.lower()
            if low in ("true", "1", "yes", "on"):
                return True
            if low in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if base is int:
            try:
                return int(raw)
            except ValueError:
                as_float = float(raw)
                if not as_float.is_integer():
                    raise
                return int(as_float)
        if base is float:
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key!r}: {text!r}", key) from None


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def serialize(config: TrainConfig) -> str:
    lines = [f"{f.name} = {format_value(getattr(config, f.name))}" for f in dataclasses.fields(config)]
    return "\n".join(lines) + "\n"


def parse_pairs(text: str) -> dict[str, Any]:
    values: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        values[key] = parse_value(key, val)
    return values


def parse(text: str, base: TrainConfig | None = None) -> TrainConfig:
    return dataclasses.replace(base or TrainConfig(), **parse_pairs(text))


def apply_overrides(config: TrainConfig, overrides: list[str]) -> TrainConfig:
    changes = {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, val = item.split("=", 1)
        key = key.strip()
        changes[key] = parse_value(key, val)
    return dataclasses.replace(config, **changes)


def preset(name: str, **changes) -> TrainConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return TrainConfig(**{**PRESETS[name], **changes})
