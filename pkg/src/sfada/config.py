"""Flat ``key = value`` configuration shared by the CLI and the benchmark harness."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

from .pipeline import AdaptationConfig
from .segmenter import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GlobalConfig:
    resolution: int = 64
    pool_k: int = 8
    K: int = 5
    budget_percent: float = 20.0
    lr0: float = 0.03
    decay_power: float = 0.9
    source_iters: int = 2000
    stage1_iters: int = 1000
    stage3_iters: int = 1000
    batch_size: int = 8
    eval_every: int = 100
    augment: bool = True
    precision: str = "float32"
    seed: int = 0

    def __post_init__(self):
        # borrow the owning modules' validation
        try:
            self.adaptation()
            TrainConfig(self.source_iters, self.batch_size, self.lr0, self.decay_power, self.seed,
                        self.augment, self.precision)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        if self.eval_every < 1:
            raise ConfigError("eval_every must be >= 1")

    def adaptation(self, strategy: str = "stdr", semi: bool = True, **overrides) -> AdaptationConfig:
        base = {f.name: getattr(self, f.name) for f in fields(AdaptationConfig) if hasattr(self, f.name)}
        base.update(strategy=strategy, semi_enabled=semi, **overrides)
        return AdaptationConfig(**base)

    def replace(self, **changes) -> "GlobalConfig":
        return dataclasses.replace(self, **changes)

    def render(self) -> str:
        """The resolved config in the same format :func:`parse_kv` reads."""
        return "".join(f"{f.name} = {format_value(getattr(self, f.name))}\n" for f in fields(self))


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(format_value(x) for x in v)
    return str(v)


def parse_kv(text: str, allowed: Iterable[str], origin: str = "<config>") -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown or repeated keys are errors."""
    allowed = set(allowed)
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in allowed:
            raise ConfigError(f"{origin}:{lineno}: unknown config key {key!r}")
        if key in out:
            raise ConfigError(f"{origin}:{lineno}: duplicate config key {key!r}")
        out[key] = value
    return out


def coerce(key: str, value: str, kind):
    try:
        if kind is bool:
            lowered = value.lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        return kind(value)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {value!r} as {kind.__name__}") from None


_TYPES = {"int": int, "float": float, "bool": bool, "str": str}


def _field_types(cls) -> dict:
    return {f.name: _TYPES[f.type] if isinstance(f.type, str) else f.type for f in fields(cls)}


def global_from_mapping(values: Mapping[str, str], base: GlobalConfig = GlobalConfig()) -> GlobalConfig:
    types = _field_types(GlobalConfig)
    unknown = sorted(set(values) - set(types))
    if unknown:
        raise ConfigError(f"unknown config key {unknown[0]!r}")
    return base.replace(**{k: coerce(k, v, types[k]) for k, v in values.items()})


def load_global_config(path) -> GlobalConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return global_from_mapping(parse_kv(path.read_text(), _field_types(GlobalConfig), str(path)))


GLOBAL_KEYS = tuple(f.name for f in fields(GlobalConfig))
