"""Frame-by-frame DATMO pipeline and sequence drivers."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .bev_grid import BevGrid, GridSpec, crop_points, rasterize, read_velodyne_bin, remove_ground
from .clustering import Cluster, cluster_cells
from .config import CropSpec, PipelineConfig
from .errors import DataError
from .evaluation import STAGES, TimingRecord
from .kitti import parse_kitti
from .optflow import DisplacementField, FramePyramid, displacement_to_velocity, flow_between
from .tracker import Tracker, TrackOutput
from .vector_field import (
    EgoState,
    FlowField,
    MaskParams,
    continuity_mask,
    ego_motion_compensate,
    make_field,
    propagate,
    propagation_mask,
)

log = logging.getLogger(__name__)


@dataclass
class InputFrame:
    frame: int
    t: float
    points: np.ndarray | None  # None marks a corrupt frame
    ego: EgoState
    parse_ms: float = 0.0
    error: str | None = None


@dataclass
class FrameResult:
    frame: int
    t: float
    clusters: list[Cluster]
    tracks: list[TrackOutput]
    timing: TimingRecord


def moving_cells(field: FlowField, ego: EgoState, spec: GridSpec, params: MaskParams) -> np.ndarray:
    """Occupied cells whose ego-compensated speed reaches ``min_speed``."""
    absolute = ego_motion_compensate(field, ego, spec)
    return field.occupancy & (absolute.speed >= params.min_speed)


class Pipeline:
    """Stateful processor of one sequence; feed frames in time order."""

    def __init__(self, config: PipelineConfig | None = None, sequence: str = ""):
        self.config = config or PipelineConfig()
        self.config.validate()
        self.spec = self.config.grid_spec()
        self.sequence = sequence
        self.tracker = Tracker(self.config.tracker)
        self._prev_pyr: FramePyramid | None = None
        self._prev_t: float | None = None
        self._prev_field: FlowField | None = None

    def _reset_motion(self) -> None:
        self._prev_pyr = None
        self._prev_field = None

    def process(self, fr: InputFrame) -> FrameResult:
        cfg = self.config
        stages = dict.fromkeys(STAGES, 0.0)
        stages["parsing"] = fr.parse_ms
        t_start = time.perf_counter()
        clusters: list[Cluster] = []

        if fr.points is None:
            log.warning("frame %d skipped: %s", fr.frame, fr.error or "unreadable")
            self._reset_motion()
        else:
            t0 = time.perf_counter()
            pts = crop_points(fr.points, cfg.crop.roi)
            grid = remove_ground(rasterize(pts, self.spec, fr.t))
            t1 = time.perf_counter()
            stages["conversion"] = (t1 - t0) * 1e3
            clusters = self._motion(grid, fr, stages)

        t0 = time.perf_counter()
        tracks = self.tracker.step(clusters, fr.ego, fr.t, fr.frame)
        stages["tracking"] = (time.perf_counter() - t0) * 1e3
        total = fr.parse_ms + (time.perf_counter() - t_start) * 1e3
        timing = TimingRecord(self.sequence, fr.frame, stages, total)
        return FrameResult(fr.frame, fr.t, clusters, tracks, timing)

    def _motion(self, grid: BevGrid, fr: InputFrame, stages: dict) -> list[Cluster]:
        cfg = self.config
        t0 = time.perf_counter()
        pyr = FramePyramid.build(grid.quantized(), cfg.flow)
        prev_pyr, prev_t = self._prev_pyr, self._prev_t
        self._prev_pyr, self._prev_t = pyr, fr.t
        if prev_pyr is None:
            stages["flow"] = (time.perf_counter() - t0) * 1e3
            return []
        # flow from the current frame back to the previous one, negated, puts
        # every vector on a cell occupied now rather than one frame ago
        back = flow_between(pyr, prev_pyr, cfg.flow)
        disp = DisplacementField(-back.dx, -back.dy, back.valid)
        dt = fr.t - prev_t
        vx, vy = displacement_to_velocity(disp, self.spec, dt)
        t1 = time.perf_counter()
        stages["flow"] = (t1 - t0) * 1e3

        masks = replace(cfg.masks, dt=dt)
        field = make_field(vx, vy, self.spec, grid.occupancy & disp.valid, fr.t)
        prev_field, self._prev_field = self._prev_field, field
        if prev_field is None:
            stages["masking"] = (time.perf_counter() - t1) * 1e3
            return []
        mc = continuity_mask(field, self.spec, masks)
        mp = propagation_mask(propagate(prev_field, self.spec, masks), field, masks)
        keep = mc & mp & moving_cells(field, fr.ego, self.spec, masks)
        # clusters carry relative velocities, which is what the tracker measures
        kept = replace(field, occupancy=keep)
        t2 = time.perf_counter()
        stages["masking"] = (t2 - t1) * 1e3

        clusters = cluster_cells(kept, self.spec, cfg.cluster.link_distance, cfg.cluster.min_cells)
        stages["clustering"] = (time.perf_counter() - t2) * 1e3
        return clusters


def run_frames(
    frames: Iterable[InputFrame],
    config: PipelineConfig | None = None,
    sequence: str = "",
    track_fh: IO[str] | None = None,
) -> tuple[list[TrackOutput], list[TimingRecord]]:
    pipe = Pipeline(config, sequence)
    tracks: list[TrackOutput] = []
    timing: list[TimingRecord] = []
    for fr in frames:
        res = pipe.process(fr)
        tracks.extend(res.tracks)
        timing.append(res.timing)
        if track_fh is not None:
            for tr in res.tracks:
                track_fh.write(json.dumps(tr.to_json()) + "\n")
    return tracks, timing


# -- input sources ----------------------------------------------------------------


def input_kind(path: str | Path) -> str:
    path = Path(path)
    if (path / "velodyne").is_dir():
        return "kitti"
    if (path / "frames").is_dir():
        return "synthetic"
    raise DataError(f"{path}: neither a KITTI sequence (velodyne/) nor a synthetic dataset (frames/)")


def synthetic_frames(path: str | Path) -> Iterator[InputFrame]:
    """Frames of a dataset written by the simulator."""
    path = Path(path)
    ego_path = path / "ego.csv"
    if not ego_path.exists():
        raise DataError(f"{path}: missing ego.csv")
    with open(ego_path, newline="") as fh:
        ego_rows = [(float(r["t"]), EgoState(float(r["v"]), float(r["omega"]))) for r in csv.DictReader(fh)]
    files = sorted((path / "frames").glob("*.bin"))
    if len(files) != len(ego_rows):
        raise DataError(f"{path}: {len(files)} frame files but {len(ego_rows)} ego rows")
    for f, (t, ego) in zip(files, ego_rows):
        t0 = time.perf_counter()
        try:
            pts, err = read_velodyne_bin(f), None
        except DataError as exc:
            pts, err = None, str(exc)
        yield InputFrame(int(f.stem), t, pts, ego, (time.perf_counter() - t0) * 1e3, err)


def kitti_frames(path: str | Path, ego_csv: str | Path | None = None) -> Iterator[InputFrame]:
    it = parse_kitti(path, ego_csv)
    while True:
        t0 = time.perf_counter()
        try:
            b = next(it)
        except StopIteration:
            return
        yield InputFrame(b.frame, b.t, b.points, b.ego, (time.perf_counter() - t0) * 1e3, b.error)


def open_input(path: str | Path, ego_csv: str | Path | None = None) -> Iterator[InputFrame]:
    kind = input_kind(path)
    return kitti_frames(path, ego_csv) if kind == "kitti" else synthetic_frames(path)


def sweep_crop(lateral_offset: float, base: CropSpec, curvature: float, margin: float = 8.0) -> CropSpec:
    """Lateral band around a target lane, widened for road curvature at the ROI ends."""
    reach = max(abs(base.x_min), abs(base.x_max))
    bend = 0.5 * abs(curvature) * reach**2
    lo = lateral_offset - margin - (bend if curvature < 0 else 0.0)
    hi = lateral_offset + margin + (bend if curvature > 0 else 0.0)
    return CropSpec(base.x_min, base.x_max, lo, hi)


def scenario_frames(spec) -> Iterator[InputFrame]:
    """In-memory frames of a simulated scenario (no files written)."""
    from .simulator import run_scenario

    for fr in run_scenario(spec):
        yield InputFrame(fr.index, fr.t, fr.points, fr.ego)
