"""Flat, namespaced pipeline configuration (``sim.*``, ``filter.*``, ``apfp.*``, ...).

Every key maps onto a field of one of the module config dataclasses; nested dataclasses
add another dotted level (``apfp.fastica.contrast``). Files are JSON objects of these
flat keys. Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from typing import Any

from .apfp import ApfpConfig
from .experiment import ExperimentConfig
from .online import OnlineConfig
from .preprocess import FilterSpec
from .simulator import SimConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SimGrid:
    """The (noise level, repetition) grid emitted by ``simulate``. ``None`` means no noise."""

    noise_levels: tuple = (None, 30.0, 20.0, 10.0)
    repetitions: int = 3
    ramp_s: float = 2.0
    hold_s: float = 3.0

    def __post_init__(self):
        if self.repetitions < 0:
            raise ValueError("repetitions must be >= 0")


@dataclass(frozen=True)
class EvalConfig:
    tol_ms: float = 1.0
    max_lag: int = 58
    mr_floor: float = 0.3


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    sim: SimConfig = SimConfig()
    grid: SimGrid = SimGrid()
    filter: FilterSpec = FilterSpec()
    apfp: ApfpConfig = ApfpConfig()
    online: OnlineConfig = OnlineConfig()
    eval: EvalConfig = EvalConfig()
    report: ExperimentConfig = ExperimentConfig()
    curation_rule: str = "and"
    preprocess: bool = False  # filter + repair before offline decomposition

    def to_flat(self) -> dict:
        return flatten(self)

    def dumps(self) -> str:
        return json.dumps(self.to_flat(), indent=2, sort_keys=True) + "\n"


def flatten(obj, prefix: str = "") -> dict:
    out = {}
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(v):
            out.update(flatten(v, key + "."))
        elif isinstance(v, tuple):
            out[key] = list(v)
        else:
            out[key] = v
    return out


def _coerce(value, default):
    if isinstance(default, tuple) and isinstance(value, list):
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise TypeError("expected true/false")
        return value
    if isinstance(default, int) and not isinstance(value, int):
        if isinstance(value, float) and value.is_integer():
            return int(value)
        raise TypeError("expected an integer")
    if isinstance(default, float) and isinstance(value, (int, float)) and not isinstance(value, bool):
        return float(value)
    return value


def _build(cls, flat: dict, prefix: str, used: set):
    kwargs = {}
    for f in dataclasses.fields(cls):
        key = prefix + f.name
        default = f.default
        if dataclasses.is_dataclass(default):
            if any(k.startswith(key + ".") for k in flat):
                kwargs[f.name] = _build(type(default), flat, key + ".", used)
            continue
        if key in flat:
            used.add(key)
            try:
                kwargs[f.name] = _coerce(flat[key], default)
            except TypeError as e:
                raise ConfigError(f"config key {key!r}: {e}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid {prefix.rstrip('.') or 'config'} settings: {e}") from None


def from_flat(flat: dict[str, Any]) -> PipelineConfig:
    known = set(flatten(PipelineConfig()))
    unknown = sorted(set(flat) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    return _build(PipelineConfig, flat, "", set())


def load(path) -> PipelineConfig:
    try:
        with open(path) as f:
            flat = json.load(f)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    except json.JSONDecodeError as e:
        raise ConfigError(f"config {path} is not valid JSON: {e}") from None
    if not isinstance(flat, dict):
        raise ConfigError(f"config {path} must hold a JSON object of dotted keys")
    return from_flat(flat)


def override(config: PipelineConfig, updates: dict[str, Any]) -> PipelineConfig:
    """Apply flat ``key: value`` updates (e.g. from command-line flags)."""
    flat = config.to_flat()
    flat.update(updates)
    return from_flat(flat)


def parse_assignment(text: str) -> tuple[str, Any]:
    """``key=value`` with the value read as JSON when possible, else as a string."""
    if "=" not in text:
        raise ConfigError(f"expected key=value, got {text!r}")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value
