import math
from collections import defaultdict
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datmo.bev_grid import crop_points
from datmo.config import CropSpec, PipelineConfig
from datmo.evaluation import STAGES, timing_profile
from datmo.pipeline import InputFrame, Pipeline, run_frames, scenario_frames, sweep_crop
from datmo.simulator import LidarSpec, ScenarioSpec, TargetSpec, run_scenario

LIGHT = LidarSpec(channels=16, horizontal_resolution=0.4)


def test_empty_scene_no_tracks():
    # target parked far beyond sensor range at ego speed
    spec = ScenarioSpec(tv=TargetSpec(speed=20.0, start_gap=500.0), duration=3.0)
    tracks, timing = run_frames(scenario_frames(spec))
    assert tracks == [] and len(timing) == 30


@pytest.mark.xfail(
    reason="sensor-fixed ring and side-face patterns split the target into several short tracks",
    strict=False,
)
def test_keep_lane_coverage():
    spec = ScenarioSpec(tv=TargetSpec(speed=25.0))
    frames = list(run_scenario(spec))
    tracks, _ = run_frames(InputFrame(f.index, f.t, f.points, f.ego) for f in frames)
    by_frame = defaultdict(list)
    for tr in tracks:
        by_frame[tr.frame].append(tr)
    first = min(by_frame)
    covered = []
    for f in frames[first:]:
        o = f.truth.objects[0]
        covered.append(any(math.hypot(t.x - o.x, t.y - o.y) <= 2.0 for t in by_frame[f.index]))
    assert np.mean(covered) >= 0.8


def test_moving_target_detected():
    spec = ScenarioSpec(tv=TargetSpec(speed=30.0, lateral_offset=7.0), duration=4.0, seed=5)
    frames = list(run_scenario(spec))
    tracks, _ = run_frames(InputFrame(f.index, f.t, f.points, f.ego) for f in frames)
    assert tracks
    assert all(t.status == "confirmed" for t in tracks)
    # the scene holds nothing else, so every track lies on the target's lane
    truth = {f.index: f.truth.objects[0] for f in frames}
    for t in tracks:
        assert abs(t.y - truth[t.frame].y) < 2.0


def test_corrupt_frame_coasts():
    spec = ScenarioSpec(tv=TargetSpec(speed=30.0, lateral_offset=7.0), duration=2.0, seed=5, lidar=LIGHT)
    frames = list(scenario_frames(spec))
    frames[10] = replace(frames[10], points=None, error="byte offset 16")
    pipe = Pipeline()
    results = [pipe.process(f) for f in frames]
    assert results[10].clusters == []
    assert [r.frame for r in results] == list(range(20))
    # the frame after a gap has no previous grid, so no motion is measured
    assert results[11].clusters == []


def test_timing_records():
    spec = ScenarioSpec(duration=0.2, lidar=LIGHT)
    _, timing = run_frames(scenario_frames(spec))
    prof = timing_profile(timing)
    assert prof["samples"] == 1
    rec = timing[1]
    assert set(rec.stages) == set(STAGES)
    assert sum(rec.stages.values()) <= rec.total + 2.0


def test_rerun_identical():
    spec = ScenarioSpec(tv=TargetSpec(speed=12.0, lateral_offset=-3.5), duration=2.0, lidar=LIGHT)
    a, _ = run_frames(scenario_frames(spec))
    b, _ = run_frames(scenario_frames(spec))
    assert a == b


@settings(max_examples=30, deadline=None)
@given(st.floats(-30, 30), st.floats(1, 50), st.floats(-20, 20), st.floats(1, 20))
def test_crop_inside_roi(x0, dx, y0, dy):
    rng = np.random.default_rng(0)
    pts = rng.uniform(-100, 100, (2000, 3))
    roi = (x0, x0 + dx, y0, y0 + dy)
    kept = crop_points(pts, roi)
    assert ((kept[:, 0] >= roi[0]) & (kept[:, 0] < roi[1]) & (kept[:, 1] >= roi[2]) & (kept[:, 1] < roi[3])).all()
    inside = (pts[:, 0] >= roi[0]) & (pts[:, 0] < roi[1]) & (pts[:, 1] >= roi[2]) & (pts[:, 1] < roi[3])
    assert len(kept) == inside.sum()


def test_sweep_crop_band():
    base = CropSpec()
    c = sweep_crop(40.0, base, 0.0)
    assert (c.x_min, c.x_max, c.y_min, c.y_max) == (-15.0, 80.0, 32.0, 48.0)
    # a left-curving road bends the lane toward +y at the ROI ends
    c = sweep_crop(0.0, base, 1 / 500)
    assert c.y_max == pytest.approx(8.0 + 0.5 * 80**2 / 500)
    PipelineConfig(crop=c).validate()
