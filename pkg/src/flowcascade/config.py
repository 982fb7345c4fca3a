"""Pipeline configuration: canonical JSON, strict validation, stable hashing.

Unknown keys are rejected so typos fail loudly; every run artifact embeds the
effective-config hash for provenance.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional


class ConfigError(Exception):
    pass


@dataclass
class FlowStateKnobs:
    ttl_ms: int = 10_000
    q1_capacity: int = 4096
    q3_capacity: int = 4096
    q2_capacity: int = 262_144
    n_slow_packets: int = 10


@dataclass
class AssignmentKnobs:
    metric: str = "lc"
    quantile_start: float = 0.01
    quantile_stop: float = 0.99
    quantile_step: float = 0.01
    stage1_kind: str = "universal"   # tree-family upstream
    stage2_kind: str = "per_class"   # boosted-family upstream
    mode: str = "pareto_knee"
    target: Optional[float] = None
    knee_tolerance: float = 0.002


@dataclass
class HarnessKnobs:
    rates: list[float] = field(default_factory=list)
    consumers: int = 1
    seed: int = 0
    speed: float = 1.0


@dataclass
class PathKnobs:
    models_dir: Optional[str] = None
    cascade: Optional[str] = None
    masks_dir: Optional[str] = None
    policies_dir: Optional[str] = None


@dataclass
class PipelineConfig:
    flow_state: FlowStateKnobs = field(default_factory=FlowStateKnobs)
    assignment: AssignmentKnobs = field(default_factory=AssignmentKnobs)
    harness: HarnessKnobs = field(default_factory=HarnessKnobs)
    paths: PathKnobs = field(default_factory=PathKnobs)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    def quantile_grid(self) -> list[float]:
        a = self.assignment
        grid = []
        q = a.quantile_start
        while q <= a.quantile_stop + 1e-12:
            grid.append(round(q, 10))
            q += a.quantile_step
        return grid


def config_hash(config: PipelineConfig) -> str:
    canonical = json.dumps(config.to_json(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()[:16]


_SECTIONS = {
    "flow_state": FlowStateKnobs,
    "assignment": AssignmentKnobs,
    "harness": HarnessKnobs,
    "paths": PathKnobs,
}


def _build_section(name: str, cls, doc: dict):
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(known)
    if unknown:
        raise ConfigError(f"unknown key {name}.{sorted(unknown)[0]}")
    return cls(**doc)


def _positive_int(section: str, name: str, value) -> None:
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise ConfigError(f"{section}.{name} must be a positive integer, got {value!r}")


def validate_config(config: PipelineConfig) -> None:
    fs = config.flow_state
    for name in ("ttl_ms", "q1_capacity", "q3_capacity", "q2_capacity", "n_slow_packets"):
        _positive_int("flow_state", name, getattr(fs, name))
    a = config.assignment
    if a.metric not in ("lc", "entropy"):
        raise ConfigError(f"assignment.metric must be 'lc' or 'entropy', got {a.metric!r}")
    for kind_name in ("stage1_kind", "stage2_kind"):
        if getattr(a, kind_name) not in ("universal", "per_class"):
            raise ConfigError(f"assignment.{kind_name} must be 'universal' or 'per_class'")
    if a.mode not in ("pareto_knee", "target_portion", "target_f1"):
        raise ConfigError(f"assignment.mode must be pareto_knee/target_portion/target_f1, got {a.mode!r}")
    if not 0.0 < a.quantile_start <= a.quantile_stop < 1.0:
        raise ConfigError("assignment quantile_start/quantile_stop must satisfy 0 < start <= stop < 1")
    if a.quantile_step <= 0:
        raise ConfigError("assignment.quantile_step must be positive")
    if a.target is not None and not 0.0 <= a.target <= 1.0:
        raise ConfigError(f"assignment.target must be in [0, 1], got {a.target!r}")
    if a.knee_tolerance < 0:
        raise ConfigError("assignment.knee_tolerance must be >= 0")
    h = config.harness
    _positive_int("harness", "consumers", h.consumers)
    if not isinstance(h.seed, int) or isinstance(h.seed, bool) or h.seed < 0:
        raise ConfigError(f"harness.seed must be a non-negative integer, got {h.seed!r}")
    if not (h.speed > 0):
        raise ConfigError(f"harness.speed must be positive, got {h.speed!r}")
    for rate in h.rates:
        if not (isinstance(rate, (int, float)) and rate > 0):
            raise ConfigError(f"harness.rates entries must be positive numbers, got {rate!r}")
    p = config.paths
    for name in ("models_dir", "cascade", "masks_dir", "policies_dir"):
        value = getattr(p, name)
        if value is not None and not Path(value).exists():
            raise ConfigError(f"paths.{name}: {value} does not exist")


def parse_config(doc: dict) -> PipelineConfig:
    if not isinstance(doc, dict):
        raise ConfigError("config root must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section {sorted(unknown)[0]!r}")
    sections = {}
    for name, cls in _SECTIONS.items():
        body = doc.get(name, {})
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object")
        try:
            sections[name] = _build_section(name, cls, body)
        except TypeError as exc:
            raise ConfigError(f"bad value in section {name!r}: {exc}") from exc
    config = PipelineConfig(**sections)
    validate_config(config)
    return config


def load_config(path) -> PipelineConfig:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(doc)


def save_config(config: PipelineConfig, path) -> None:
    with open(path, "w") as fh:
        json.dump(config.to_json(), fh, indent=2)
