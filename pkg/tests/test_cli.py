import csv
import json
import math
from pathlib import Path

import numpy as np
import pytest
from _helpers import make_kitti_sequence

from datmo.cli import main
from datmo.config import PipelineConfig, load_config
from datmo.simulator import Maneuver, ScenarioSpec, read_gt_jsonl, sweep_configurations
from datmo.tracker import TRACK_COLUMNS, TrackOutput

# a coarse scanner keeps the end-to-end tests quick
LIGHT = {"lidar": {"channels": 16, "horizontal_resolution": 0.4}}


def write_spec(path: Path, **extra) -> Path:
    path.write_text(json.dumps({**LIGHT, **extra}))
    return path


def simulate(tmp_path, name="data", **extra):
    spec = write_spec(tmp_path / f"{name}.json", **extra)
    out = tmp_path / name
    assert main(["simulate", "--spec", str(spec), "--out", str(out)]) == 0
    return out


def test_simulate_file_count(tmp_path):
    out = simulate(tmp_path, duration=10.0)
    assert len(list((out / "frames").glob("*.bin"))) == 100
    assert len(read_gt_jsonl(out / "gt.jsonl")) == 100
    rows = list(csv.reader(open(out / "ego.csv")))
    assert rows[0] == ["t", "v", "omega"] and len(rows) == 101


def test_seed_changes_noise_not_truth(tmp_path):
    a = simulate(tmp_path, "a", duration=0.3, seed=1)
    b = simulate(tmp_path, "b", duration=0.3, seed=2)
    assert (a / "gt.jsonl").read_bytes() == (b / "gt.jsonl").read_bytes()
    assert (a / "frames" / "000001.bin").read_bytes() != (b / "frames" / "000001.bin").read_bytes()


def test_simulate_overrides(tmp_path):
    spec = write_spec(tmp_path / "s.json", duration=0.2)
    out = tmp_path / "o"
    assert main(["simulate", "--spec", str(spec), "--out", str(out), "--tv-speed", "31",
                 "--tv-type", "van", "--lateral-offset", "-3.5"]) == 0
    scen = json.loads((out / "scenario.json").read_text())
    assert scen["tv"]["speed"] == 31.0 and scen["tv"]["type"] == "van"
    assert scen["tv"]["lateral_offset"] == -3.5


def test_run_deterministic_and_csv(tmp_path):
    data = simulate(tmp_path, duration=2.0)
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["run", "--input", str(data), "--out", str(a), "--timing", str(tmp_path / "t.csv")]) == 0
    assert main(["run", "--input", str(data), "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    for line in a.read_text().splitlines():
        rec = json.loads(line)
        assert tuple(rec) == TRACK_COLUMNS and rec["status"] == "confirmed"
    c = tmp_path / "c.csv"
    assert main(["run", "--input", str(data), "--out", str(c)]) == 0
    rows = list(csv.reader(open(c)))
    assert tuple(rows[0]) == TRACK_COLUMNS
    assert len(rows) - 1 == len(a.read_text().splitlines())
    timing = list(csv.DictReader(open(tmp_path / "t.csv")))
    assert len(timing) == 20


def test_run_needs_input(tmp_path):
    assert main(["run", "--out", str(tmp_path / "x.jsonl")]) == 1
    assert main(["run", "--input", str(tmp_path / "nothing"), "--out", str(tmp_path / "x.jsonl")]) == 2


def test_dump_config_roundtrip(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text("[masks]\nalpha_p = 0.7\n")
    assert main(["run", "--config", str(cfg), "--dump-config"]) == 0
    dumped = tmp_path / "dumped.toml"
    dumped.write_text(capsys.readouterr().out)
    assert load_config(dumped) == load_config(cfg)
    assert load_config(dumped).masks.alpha_p == 0.7
    assert load_config(dumped).flow == PipelineConfig().flow


def test_usage_errors_exit_1(tmp_path):
    assert pytest.raises(SystemExit, main, ["frobnicate"]).value.code == 1
    assert pytest.raises(SystemExit, main, ["run", "--no-such-flag"]).value.code == 1
    bad = tmp_path / "bad.toml"
    bad.write_text("[flow]\nnum_pyramid_levels = 0\n")
    assert main(["run", "--config", str(bad), "--dump-config"]) == 1


def perfect_tracks(gt_path: Path, out: Path, shift: float = 0.0) -> None:
    with open(out, "w") as fh:
        for g in read_gt_jsonl(gt_path):
            for o in g.objects:
                tr = TrackOutput(g.t + shift, g.frame, o.id, o.x, o.y, o.theta, math.hypot(o.vx_abs, o.vy_abs),
                                 o.yaw_rate, "confirmed", o.vx_rel, o.vy_rel, o.yaw_rate_rel)
                fh.write(json.dumps(tr.to_json()) + "\n")


def test_eval_perfect_tracks(tmp_path, capsys):
    data = simulate(tmp_path, duration=2.0)
    tracks = tmp_path / "perfect.jsonl"
    perfect_tracks(data / "gt.jsonl", tracks)
    out = tmp_path / "res" / "metrics.json"
    assert main(["eval", "--tracks", str(tracks), "--gt", str(data), "--out", str(out)]) == 0
    m = json.loads(out.read_text())
    assert set(m) == {"low_dv", "high_dv"}
    assert all(set(v) == {"precision", "recall", "sigma_v", "sigma_theta", "time_ms"} for v in m.values())
    hi = m["high_dv"]
    assert hi["precision"] == 1.0 and hi["recall"] == 1.0
    assert hi["sigma_v"] == 0.0 and hi["sigma_theta"] == 0.0
    for name in ("errors.csv", "sensitivity.csv", "details.json"):
        assert (out.parent / name).exists()
    assert "Precision" in capsys.readouterr().out


def test_eval_shifted_tracks(tmp_path, capsys):
    data = simulate(tmp_path, duration=0.5)
    tracks = tmp_path / "shifted.jsonl"
    perfect_tracks(data / "gt.jsonl", tracks, shift=0.1)
    code = main(["eval", "--tracks", str(tracks), "--gt", str(data / "gt.jsonl"), "--out", str(tmp_path / "m.json")])
    assert code == 2
    err = capsys.readouterr().err
    assert "0, 1, 2, 3, 4" in err


def test_kitti_run_and_eval(tmp_path):
    seq = make_kitti_sequence(tmp_path / "seq", frames=8)
    out = tmp_path / "k.jsonl"
    assert main(["run", "--input", str(seq), "--out", str(out)]) == 0
    assert main(["eval", "--tracks", str(out), "--gt", str(seq), "--out", str(tmp_path / "km.json")]) == 0


def test_sweep_outputs(tmp_path):
    scen = write_spec(tmp_path / "base.json", duration=0.6)
    out = tmp_path / "sweep"
    args = ["sweep", "--scenario", str(scen), "--out", str(out), "--speeds", "15,30",
            "--offsets=-3.5:3.5:3.5", "--types", "sedan,cyclist", "--maneuvers", "keep,lc2",
            "--decimate", "2", "--crop-to-target"]
    assert main(args) == 0
    expected = sweep_configurations(
        ScenarioSpec(), [15, 30], [-3.5, 0.0, 3.5], [Maneuver("keep"), Maneuver("lane_change", s=2.0)],
        ["sedan", "cyclist"], decimate=2)
    # 2 speeds x 3 offsets x (2 sedan maneuvers + 1 cyclist) = 18 runs, every other kept
    assert len(expected) == 9
    assert len(list((out / "tracks").glob("*.jsonl"))) == 9
    for name in ("metrics.json", "details.json", "errors.csv", "sensitivity.csv", "timing.csv"):
        assert (out / name).exists()
    timing = list(csv.DictReader(open(out / "timing.csv")))
    assert len(timing) == 9 * 6
    assert np.isfinite([float(r["total"]) for r in timing]).all()


def test_sweep_bad_maneuver(tmp_path):
    assert main(["sweep", "--out", str(tmp_path), "--maneuvers", "zigzag"]) == 1
