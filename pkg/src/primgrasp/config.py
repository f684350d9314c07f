"""Pipeline configuration as a flat dotted key-value TOML file.

Every key is ``section.name`` with a scalar or array value, for example::

    seed = 3
    gripper.max_opening = 0.085
    weights.omega = [1.0, 1.0, 2.0]
    workspace.lo = [0.2, -0.4, 0.0]

``[section]`` tables are accepted too; they flatten to the same keys.
"""
from __future__ import annotations

import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .fit import RansacParams
from .gripper import GripperModel, ScoringWeights
from .rank import IDENTITY_QUAT, Workspace
from .synth import SceneConfig

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass(frozen=True)
class PipelineOptions:
    """Pipeline plumbing outside the sub-models."""

    clip_near: float = 200.0  # mm
    clip_far: float = 2000.0  # mm
    min_points: int = 30
    small_object: float = 0.04
    standoff: float = 0.015
    normalize_pool: str = "request"  # request | shape
    reference_quat: tuple = IDENTITY_QUAT
    voxel: float = 0.004  # scene cloud downsampling for gating, m
    table_height: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "reference_quat", tuple(float(v) for v in self.reference_quat))
        if not 0 < self.clip_near < self.clip_far:
            raise ValueError("clip interval needs 0 < near < far")
        if self.normalize_pool not in ("request", "shape"):
            raise ValueError("normalize_pool must be request or shape")
        if len(self.reference_quat) != 4:
            raise ValueError("reference_quat needs four components")
        if self.voxel < 0 or self.min_points < 1:
            raise ValueError("voxel must be >= 0 and min_points >= 1")


@dataclass(frozen=True)
class PipelineConfig:
    gripper: GripperModel = field(default_factory=GripperModel)
    weights: ScoringWeights = field(default_factory=ScoringWeights)
    ransac: RansacParams = field(default_factory=RansacParams)
    workspace: Workspace = field(default_factory=Workspace)
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    synth: SceneConfig = field(default_factory=SceneConfig)
    seed: int = 0

    def to_flat(self) -> dict:
        out = {"seed": self.seed}
        for f in fields(self):
            if f.name == "seed":
                continue
            for k, v in asdict(getattr(self, f.name)).items():
                out[f"{f.name}.{k}"] = list(v) if isinstance(v, tuple) else v
        return out


_SECTIONS = {f.name: f for f in fields(PipelineConfig) if f.name != "seed"}


def _flatten(data: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in data.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def _coerce(cls, name: str, value):
    default = {f.name: f.default for f in fields(cls)}.get(name)
    if isinstance(default, tuple) or isinstance(value, list):
        return tuple(value)
    if isinstance(default, bool):
        return bool(value)
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, float) and not value.is_integer():
            raise ConfigError(f"{name} must be an integer")
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def config_from_flat(flat: dict, base: PipelineConfig | None = None) -> PipelineConfig:
    """Apply dotted keys onto ``base`` (defaults when omitted)."""
    cfg = base or PipelineConfig()
    updates = {}
    for key, value in flat.items():
        if key == "seed":
            updates["seed"] = int(value)
            continue
        section, _, name = key.partition(".")
        if section not in _SECTIONS or not name:
            raise ConfigError(f"unknown config key {key!r}")
        current = getattr(cfg, section)
        if name not in {f.name for f in fields(current)}:
            raise ConfigError(f"unknown config key {key!r}")
        updates.setdefault(section, {})[name] = _coerce(type(current), name, value)
    out = {}
    try:
        for section, vals in updates.items():
            if section == "seed":
                out["seed"] = vals
            else:
                out[section] = replace(getattr(cfg, section), **vals)
        return replace(cfg, **out)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc


def load_config(path=None) -> PipelineConfig:
    """Read a config file; ``None`` gives the defaults."""
    if path is None:
        return PipelineConfig()
    try:
        with open(Path(path), "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return config_from_flat(_flatten(data))
