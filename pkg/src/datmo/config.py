"""Pipeline configuration: one TOML file with a table per stage."""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import tomli_w

from ._dc import from_dict, to_dict
from .bev_grid import GridSpec
from .errors import ConfigError
from .evaluation import EvalParams
from .optflow import FlowParams
from .tracker import TrackerParams
from .vector_field import MaskParams

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib


@dataclass(frozen=True)
class CropSpec:
    """Region of interest in the sensor frame [m]; the grid covers exactly this box."""

    x_min: float = -15.0
    x_max: float = 80.0
    y_min: float = -25.0
    y_max: float = 25.0

    def validate(self) -> None:
        if not (self.x_max > self.x_min and self.y_max > self.y_min):
            raise ConfigError("crop box must have positive extent")

    @property
    def roi(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.x_max, self.y_min, self.y_max)


@dataclass(frozen=True)
class GridParams:
    """Cell size and cell-value parameters; the extent comes from the crop."""

    cell: float = 0.17
    a: float = 1.0
    b: float = 1.0
    h_max: float = 3.0
    ground_threshold: float = 25.0
    z_ground: float = -1.73
    z_cap: float = 4.0


@dataclass(frozen=True)
class ClusterParams:
    link_distance: float = 0.6
    min_cells: int = 4


@dataclass(frozen=True)
class IOConfig:
    input: str = ""
    output: str = ""
    ego_csv: str = ""


@dataclass(frozen=True)
class PipelineConfig:
    grid: GridParams = field(default_factory=GridParams)
    crop: CropSpec = field(default_factory=CropSpec)
    flow: FlowParams = field(default_factory=FlowParams)
    masks: MaskParams = field(default_factory=MaskParams)
    cluster: ClusterParams = field(default_factory=ClusterParams)
    tracker: TrackerParams = field(default_factory=TrackerParams)
    eval: EvalParams = field(default_factory=EvalParams)
    io: IOConfig = field(default_factory=IOConfig)

    def validate(self) -> None:
        self.crop.validate()
        if not self.grid.cell > 0:
            raise ConfigError("grid cell size must be positive")
        self.grid_spec().validate()
        self.flow.validate()
        self.masks.validate()
        self.tracker.validate()
        if not self.cluster.link_distance > 0 or self.cluster.min_cells < 1:
            raise ConfigError("cluster link_distance must be positive and min_cells >= 1")
        try:
            self.eval.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def grid_spec(self) -> GridSpec:
        g = self.grid
        c = self.crop
        return GridSpec.from_extent(
            c.x_min, c.x_max, c.y_min, c.y_max, g.cell,
            a=g.a, b=g.b, h_max=g.h_max, ground_threshold=g.ground_threshold,
            z_ground=g.z_ground, z_cap=g.z_cap,
        )

    @classmethod
    def from_dict(cls, data: dict) -> PipelineConfig:
        cfg = from_dict(cls, data)
        cfg.validate()
        return cfg

    def to_dict(self) -> dict:
        return _drop_none(to_dict(self))


def _drop_none(d):
    if isinstance(d, dict):
        return {k: _drop_none(v) for k, v in d.items() if v is not None}
    return d


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a TOML (or ``.json``) config; missing keys take their defaults."""
    if path is None:
        return PipelineConfig()
    data = load_toml_or_json(path)
    return PipelineConfig.from_dict(data)


def dumps_config(cfg: PipelineConfig) -> str:
    return tomli_w.dumps(cfg.to_dict())


def load_toml_or_json(path: str | Path) -> dict:
    path = Path(path)
    try:
        text = path.read_text()
        return json.loads(text) if path.suffix == ".json" else tomllib.loads(text)
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    except (ValueError, tomllib.TOMLDecodeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
