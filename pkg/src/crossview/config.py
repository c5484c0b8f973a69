"""Pipeline configuration: one YAML file with nested tables, all defaults embedded."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .decomp import DEFAULT_GROUND_BAND, DEFAULT_MIN_POINTS, EXTRACT_MARGIN
from .field import FitConfig, LossWeights
from .geom import RigidTransform
from .raysample import HIT_THRESHOLD, RingSpec
from .render import SensorModel


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SensorSpec:
    """A virtual sensor: position, heading and downward pitch plus the scan pattern."""

    name: str = "roadside"
    position: tuple = (0.0, 0.0, 6.0)
    yaw_deg: float = 0.0
    pitch_down_deg: float = 0.0
    channels: int = 64
    vertical_fov: tuple = (-25.0, 15.0)
    horizontal_fov: tuple = (-180.0, 180.0)
    horizontal_resolution: float = 0.2
    max_range: float = 200.0

    def pose(self) -> RigidTransform:
        p = math.radians(self.pitch_down_deg)
        ry = np.array([[math.cos(p), 0, math.sin(p)], [0, 1, 0], [-math.sin(p), 0, math.cos(p)]])
        return RigidTransform.from_yaw(math.radians(self.yaw_deg), self.position) @ RigidTransform(ry, (0, 0, 0))

    def model(self) -> SensorModel:
        return SensorModel(self.pose(), self.channels, tuple(self.vertical_fov), tuple(self.horizontal_fov),
                           self.horizontal_resolution, self.max_range, self.name)


@dataclass(frozen=True)
class PipelineConfig:
    dataset_root: str = "data"
    output_root: str = "out"
    reference_root: str | None = None  # optional rendered-layout ground truth for `eval`
    completed_root: str | None = None  # optional <track_id>.bin box-local completed vehicle clouds
    min_points: float = DEFAULT_MIN_POINTS
    ground_band: float = DEFAULT_GROUND_BAND
    extract_margin: float = EXTRACT_MARGIN
    pseudo_margin: float = 0.1
    align_fragments: bool = True
    background_voxel: float = 0.2
    vehicle_voxel: float = 0.1
    vehicle_padding: float = 0.6
    occupancy_voxel: float = 0.4
    dilation_radius: int = 2
    hit_threshold: float = HIT_THRESHOLD
    trace_eps: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    fit: FitConfig = field(default_factory=FitConfig)
    rings: RingSpec = field(default_factory=RingSpec)
    sensors: tuple = (SensorSpec(),)
    frames: tuple | None = None  # frame ids to render; None renders every annotated frame
    seed: int = 0

    def __post_init__(self):
        checks = [
            (self.min_points >= 0, "min_points must be >= 0"),
            (self.ground_band >= 0, "ground_band must be >= 0"),
            (self.background_voxel > 0 and self.vehicle_voxel > 0, "field voxel sizes must be positive"),
            (self.occupancy_voxel > 0, "occupancy_voxel must be positive"),
            (self.dilation_radius >= 0, "dilation_radius must be >= 0"),
            (self.hit_threshold > 0, "hit_threshold must be positive"),
            (self.trace_eps > 0, "trace_eps must be positive"),
            (len(self.sensors) > 0, "need at least one sensor"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        names = [s.name for s in self.sensors]
        if len(set(names)) != len(names):
            raise ConfigError("sensor names must be unique")
        for s in self.sensors:
            s.model()  # validates the pattern

    def with_seed(self, seed: int) -> PipelineConfig:
        return dataclasses.replace(self, seed=int(seed), fit=dataclasses.replace(self.fit, seed=int(seed)))

    def check_paths(self) -> None:
        for label, p in (("dataset_root", self.dataset_root), ("reference_root", self.reference_root),
                         ("completed_root", self.completed_root)):
            if p is not None and not Path(p).exists():
                raise ConfigError(f"{label} does not exist: {p}")


_NESTED = {"weights": LossWeights, "fit": FitConfig, "rings": RingSpec}


def _plain(value):
    if dataclasses.is_dataclass(value):
        return {f.name: _plain(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (tuple, list)):
        return [_plain(v) for v in value]
    return value


def to_dict(cfg: PipelineConfig) -> dict:
    return _plain(cfg)


def _tuplify(v):
    return tuple(_tuplify(x) for x in v) if isinstance(v, list) else v


def _build(cls, data, where):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a table")
    known = {f.name for f in dataclasses.fields(cls)}
    extra = set(data) - known
    if extra:
        raise ConfigError(f"{where}: unknown keys {sorted(extra)}")
    return {k: _tuplify(v) for k, v in data.items()}


def from_dict(data: dict) -> PipelineConfig:
    kw = _build(PipelineConfig, data or {}, "config")
    try:
        for key, cls in _NESTED.items():
            if key in kw:
                kw[key] = cls(**_build(cls, data[key], key))
        if "sensors" in kw:
            kw["sensors"] = tuple(SensorSpec(**_build(SensorSpec, s, "sensors")) for s in data["sensors"])
        if kw.get("min_points") in (".inf", "inf"):
            kw["min_points"] = math.inf
        return PipelineConfig(**kw)
    except (TypeError, ValueError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from None


def dump_config(cfg: PipelineConfig) -> str:
    return yaml.safe_dump(to_dict(cfg), sort_keys=False)


def load_config(path) -> PipelineConfig:
    try:
        data = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(data or {})
