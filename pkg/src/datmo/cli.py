"""Command line entry point: ``datmo simulate | run | eval | sweep``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import evaluation as ev
from .config import dumps_config, load_config, load_toml_or_json
from .errors import AlignmentError, ConfigError, DataError
from .kitti import ground_truth_from_labels, parse_kitti
from .pipeline import InputFrame, input_kind, open_input, run_frames, sweep_crop
from .simulator import (
    Maneuver,
    ScenarioSpec,
    read_gt_jsonl,
    run_scenario,
    sweep_configurations,
    write_scenario,
)
from .tracker import write_tracks_csv

log = logging.getLogger("datmo")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # usage errors exit with 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    """``a,b,c`` or ``start:stop:step`` (inclusive)."""
    if ":" in text:
        start, stop, step = (float(v) for v in text.split(":"))
        if step <= 0:
            raise argparse.ArgumentTypeError("step must be positive")
        n = int(round((stop - start) / step))
        return [start + k * step for k in range(n + 1)]
    return [float(v) for v in text.split(",") if v]


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="datmo", description="Optical-flow DATMO on LiDAR point clouds.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="write a synthetic scenario dataset")
    s.add_argument("--spec", help="scenario TOML/JSON (defaults apply when omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--duration", type=float)
    s.add_argument("--tv-speed", type=float)
    s.add_argument("--lateral-offset", type=float)
    s.add_argument("--tv-type", choices=["sedan", "van", "cyclist"])

    r = sub.add_parser("run", help="run the pipeline over a sequence")
    r.add_argument("--config")
    r.add_argument("--input", help="KITTI sequence dir or simulated dataset dir")
    r.add_argument("--out", help="track output path (JSONL, or CSV for a .csv suffix)")
    r.add_argument("--ego", help="ego-motion CSV for KITTI input (t,v,omega)")
    r.add_argument("--timing", metavar="CSV", help="write per-frame stage timings")
    r.add_argument("--dump-config", action="store_true", help="print the effective config and exit")

    e = sub.add_parser("eval", help="score tracks against ground truth")
    e.add_argument("--tracks", required=True)
    e.add_argument("--gt", required=True, help="gt.jsonl or a KITTI sequence dir")
    e.add_argument("--out", required=True, help="metrics.json path; CSVs go next to it")
    e.add_argument("--config")
    e.add_argument("--timing", help="timing CSV from `run --timing`")

    w = sub.add_parser("sweep", help="simulate, run and evaluate a configuration sweep")
    w.add_argument("--config")
    w.add_argument("--scenario", help="base scenario TOML/JSON")
    w.add_argument("--decimate", type=int, default=1)
    w.add_argument("--out", required=True)
    w.add_argument("--speeds", type=_floats)
    w.add_argument("--offsets", type=_floats)
    w.add_argument("--types", help="comma-separated TV types")
    w.add_argument("--maneuvers", help="comma-separated: keep, lc2, lc4")
    w.add_argument("--jobs", type=int, default=1)
    w.add_argument("--crop-to-target", action="store_true",
                   help="restrict each run's ROI to the target's lateral band")
    return p


def _scenario_spec(path: str | None) -> ScenarioSpec:
    spec = ScenarioSpec() if path is None else ScenarioSpec.from_dict(load_toml_or_json(path))
    spec.validate()
    return spec


def cmd_simulate(args) -> int:
    spec = _scenario_spec(args.spec)
    tv = spec.tv
    if args.tv_speed is not None:
        tv = replace(tv, speed=args.tv_speed)
    if args.lateral_offset is not None:
        tv = replace(tv, lateral_offset=args.lateral_offset)
    if args.tv_type is not None:
        tv = replace(tv, type=args.tv_type)
    spec = replace(spec, tv=tv)
    if args.seed is not None:
        spec = replace(spec, seed=args.seed)
    if args.duration is not None:
        spec = replace(spec, duration=args.duration)
    spec.validate()
    try:
        write_scenario(spec, args.out)
    except OSError as exc:
        raise DataError(f"cannot write {args.out}: {exc}") from exc
    print(f"wrote {spec.num_frames} frames to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    cfg = load_config(args.config)
    if args.dump_config:
        sys.stdout.write(dumps_config(cfg))
        return EXIT_OK
    src = args.input or cfg.io.input
    out = args.out or cfg.io.output
    if not src or not out:
        raise ConfigError("run needs --input and --out (or io.input / io.output in the config)")
    frames = open_input(src, args.ego or cfg.io.ego_csv or None)
    if Path(out).suffix == ".csv":
        tracks, timing = run_frames(frames, cfg, Path(src).name)
        write_tracks_csv(out, tracks)
    else:
        with open(out, "w") as fh:
            tracks, timing = run_frames(frames, cfg, Path(src).name, fh)
    if args.timing:
        ev.write_timing_csv(args.timing, timing)
        prof = ev.timing_profile(timing)
        print("mean ms/frame: " + ", ".join(f"{k}={prof[k]:.1f}" for k in (*ev.STAGES, "total")))
    print(f"{len(timing)} frames, {len(tracks)} confirmed track states -> {out}")
    return EXIT_OK


def _load_gt(path: str) -> list:
    p = Path(path)
    if p.is_dir():
        if input_kind(p) == "kitti":
            return ground_truth_from_labels(list(parse_kitti(p)))
        return read_gt_jsonl(p / "gt.jsonl")
    return read_gt_jsonl(p)


def evaluate(tracks, gt, params: ev.EvalParams, timing=None):
    ev.check_alignment(tracks, gt)
    records, skipped = ev.velocity_errors(tracks, gt, params)
    det = ev.detection_scores(tracks, gt, params)
    summary = ev.error_distribution_summary(records, params.dv_split)
    time_ms = ev.timing_profile(timing)["total"] if timing else None
    return records, skipped, det, summary, ev.metrics_dict(det, summary, time_ms), ev.detail_dict(det, summary)


def cmd_eval(args) -> int:
    cfg = load_config(args.config)
    tracks = ev.read_tracks_jsonl(args.tracks)
    gt = _load_gt(args.gt)
    timing = ev.read_timing_csv(args.timing) if args.timing else None
    records, skipped, det, summary, metrics, detail = evaluate(tracks, gt, cfg.eval, timing)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    ev.write_metrics_json(out, metrics)
    ev.write_metrics_json(out.with_name("details.json"), detail)
    ev.write_errors_csv(out.with_name("errors.csv"), records)
    ev.write_sensitivity_csv(out.with_name("sensitivity.csv"), ev.sensitivity_sweep(records))
    if timing:
        ev.write_timing_csv(out.with_name("timing.csv"), timing)
    print(ev.format_summary_table(metrics, detail))
    print(f"error records: {len(records)}, unmatched object-frames: {skipped}")
    return EXIT_OK


def _run_one(job):
    """Simulate one scenario in memory and run the pipeline over it."""
    spec, cfg = job
    gt = []

    def frames():
        for fr in run_scenario(spec):
            gt.append(fr.truth)
            yield InputFrame(fr.index, fr.t, fr.points, fr.ego)

    tracks, timing = run_frames(frames(), cfg, spec.name)
    return spec.name, tracks, timing, gt


def cmd_sweep(args) -> int:
    cfg = load_config(args.config)
    base = _scenario_spec(args.scenario)
    man_map = {
        "keep": Maneuver("keep"),
        "lc2": Maneuver("lane_change", s=2.0),
        "lc4": Maneuver("lane_change", s=4.0),
    }
    maneuvers = None
    if args.maneuvers:
        try:
            maneuvers = [man_map[m] for m in args.maneuvers.split(",")]
        except KeyError as exc:
            raise ConfigError(f"unknown maneuver {exc}") from None
    types = args.types.split(",") if args.types else None
    try:
        specs = sweep_configurations(base, args.speeds, args.offsets, maneuvers, types, args.decimate)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    jobs = []
    for spec in specs:
        c = cfg
        if args.crop_to_target:
            c = replace(cfg, crop=sweep_crop(spec.tv.lateral_offset, cfg.crop, spec.road.curvature))
        jobs.append((spec, c))

    out = Path(args.out)
    (out / "tracks").mkdir(parents=True, exist_ok=True)
    if args.jobs > 1:
        with ProcessPoolExecutor(args.jobs) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]

    records, timing = [], []
    det = ev.DetectionResult()
    for (name, tracks, tm, gt), (_, c) in zip(results, jobs):
        with open(out / "tracks" / f"{name}.jsonl", "w") as fh:
            for tr in tracks:
                fh.write(json.dumps(tr.to_json()) + "\n")
        params = c.eval if c.eval.roi is not None else replace(c.eval, roi=c.crop.roi)
        rec, _ = ev.velocity_errors(tracks, gt, params)
        records.extend(rec)
        det = det.merge(ev.detection_scores(tracks, gt, params))
        timing.extend(tm)
    summary = ev.error_distribution_summary(records, cfg.eval.dv_split)
    metrics = ev.metrics_dict(det, summary, ev.timing_profile(timing)["total"] if timing else None)
    detail = ev.detail_dict(det, summary)
    ev.write_metrics_json(out / "metrics.json", metrics)
    ev.write_metrics_json(out / "details.json", detail)
    ev.write_errors_csv(out / "errors.csv", records)
    ev.write_sensitivity_csv(out / "sensitivity.csv", ev.sensitivity_sweep(records))
    ev.write_timing_csv(out / "timing.csv", timing)
    print(f"{len(specs)} scenarios, {len(records)} error records")
    print(ev.format_summary_table(metrics, detail))
    return EXIT_OK


COMMANDS = {"simulate": cmd_simulate, "run": cmd_run, "eval": cmd_eval, "sweep": cmd_sweep}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.cmd](args)
    except AlignmentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
