"""Flat ``key = value`` run configuration with environment overrides."""
from __future__ import annotations

import hashlib
import math
import os
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .diffusion import SCHEDULE_KINDS, NoiseSchedule, build_schedule
from .model import VARIANTS

ENV_PREFIX = "T2DIFF_"


class ConfigError(ValueError):
    """Bad key or value; ``key`` names the offender."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


@dataclass(frozen=True)
class TrainConfig:
    d: int = 64
    max_len: int = 50
    k_max: int = 10
    gap_seconds: int = 1800
    batch_size: int = 256
    epochs: int = 100
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lam: float = 1.0
    a: float = 1e-4
    # None derives b from beta_T = beta_last, so T can change without touching b
    b: float | None = None
    beta_last: float = 0.02
    T: int = 50
    schedule: str = "exp"
    seed: int = 0
    negatives: int = 0  # 0 means full softmax over the vocabulary
    variant: str = "full"
    heads: int = 2
    layers: int = 1
    patience: int = 5
    eval_k: int = 20
    eval_batch: int = 256
    filter_seen: bool = False

    def __post_init__(self):
        positive = ("d", "max_len", "k_max", "gap_seconds", "batch_size", "epochs", "lr", "adam_eps",
                    "a", "beta_last", "T", "heads", "layers", "patience", "eval_k", "eval_batch")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(key, f"must be positive, got {getattr(self, key)!r}")
        for key in ("beta1", "beta2"):
            if not 0 <= getattr(self, key) < 1:
                raise ConfigError(key, "must lie in [0, 1)")
        if self.lam < 0:
            raise ConfigError("lam", "must be non-negative")
        if self.negatives < 0:
            raise ConfigError("negatives", "must be >= 0")
        if self.seed < 0:
            raise ConfigError("seed", "must be >= 0")
        if self.variant not in VARIANTS:
            raise ConfigError("variant", f"expected one of {VARIANTS}, got {self.variant!r}")
        if self.schedule not in SCHEDULE_KINDS:
            raise ConfigError("schedule", f"expected one of {SCHEDULE_KINDS}, got {self.schedule!r}")
        if self.d % self.heads:
            raise ConfigError("heads", f"d={self.d} is not divisible by {self.heads}")

    @property
    def b_value(self) -> float:
        return self.b if self.b is not None else math.log(self.beta_last / self.a) / self.T

    def noise_schedule(self) -> NoiseSchedule:
        return build_schedule(self.a, self.b_value, self.T, self.schedule)

    def with_(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_text(self) -> str:
        lines = [f"{k} = {_format(v)}" for k, v in asdict(self).items()]
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()[:12]


_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _format(v) -> str:
    if v is None:
        return "auto"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _coerce(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    try:
        if kind == "bool":
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "float | None":
            return None if raw.lower() in ("auto", "none", "") else float(raw)
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {kind}") from None
    return raw


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", f"expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        # the ablation switch is also accepted under its long name
        if key == "ablation":
            key = "variant"
        if key not in _TYPES:
            raise ConfigError(key, "unknown config key")
        out[key] = _coerce(key, value)
    return out


def env_overrides(env=None) -> dict:
    env = os.environ if env is None else env
    out = {}
    for key in _TYPES:
        name = ENV_PREFIX + key.upper()
        if name in env:
            out[key] = _coerce(key, env[name])
    return out


def load_config(path=None, env=None, **overrides) -> TrainConfig:
    """File values, then ``T2DIFF_<KEY>`` environment values, then explicit overrides."""
    values = parse_config_text(Path(path).read_text()) if path is not None else {}
    values.update(env_overrides(env))
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**values)


__all__ = ["TrainConfig", "ConfigError", "load_config", "parse_config_text", "env_overrides", "ENV_PREFIX"]
