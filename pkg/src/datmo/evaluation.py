"""Accuracy, detection and timing metrics against ground truth.

Velocity and heading errors compare the tracker's relative (EV-frame)
kinematics with the relative ground truth. Detection scoring greedily
matches confirmed tracks to moving ground-truth objects, nearest first.
"""

from __future__ import annotations

import csv
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import AlignmentError
from .simulator import GroundTruthFrame, ObjectTruth
from .tracker import TrackOutput, wrap_angle

STAGES = ("parsing", "conversion", "flow", "masking", "clustering", "tracking")
BANDS = ("low_dv", "high_dv")
METRIC_KEYS = ("precision", "recall", "sigma_v", "sigma_theta", "time_ms")
# extra per-band detail written next to metrics.json
DETAIL_KEYS = ("precision", "recall", "sigma_v", "sigma_theta", "mean_v", "mean_theta", "records", "tp", "fp", "fn")


@dataclass(frozen=True)
class EvalParams:
    match_radius: float = 2.0
    moving_threshold: float = 0.5
    # relative-speed split between the two reporting bands
    dv_split: float = 1.0
    # an object is scored only once it has been visible this many frames
    warmup_frames: int = 5
    min_points: int = 10
    roi: tuple[float, float, float, float] | None = None

    def validate(self) -> None:
        if not self.match_radius > 0:
            raise ValueError("match_radius must be positive")
        if self.warmup_frames < 0 or self.min_points < 0:
            raise ValueError("warmup_frames and min_points must be nonnegative")


@dataclass(frozen=True)
class ErrorRecord:
    t: float
    frame: int
    object_id: int
    track_id: int
    dv: float  # | |v_gt| - |v_est| |
    dtheta: float  # wrapped heading error in [0, pi]
    l: float
    beta: float
    delta_v: float  # |relative velocity| of the object

    @property
    def band(self) -> str:
        return band_of(self.delta_v)


def band_of(delta_v: float, split: float = 1.0) -> str:
    return "low_dv" if delta_v <= split else "high_dv"


@dataclass
class DetectionTally:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    frames: int = 0
    zero_detection_frames: int = 0

    def merge(self, other: DetectionTally) -> DetectionTally:
        return DetectionTally(
            self.tp + other.tp,
            self.fp + other.fp,
            self.fn + other.fn,
            self.frames + other.frames,
            self.zero_detection_frames + other.zero_detection_frames,
        )

    __add__ = merge

    @property
    def precision(self) -> float:
        # no detections at all is reported as 1.0; zero_detection_frames flags it
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else 1.0

    @property
    def recall(self) -> float:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else 1.0


@dataclass
class DetectionResult:
    bands: dict[str, DetectionTally] = field(default_factory=lambda: {b: DetectionTally() for b in BANDS})
    matches: list[tuple[int, int, int]] = field(default_factory=list)  # (frame, gt id, track id)

    def merge(self, other: DetectionResult) -> DetectionResult:
        return DetectionResult(
            {b: self.bands[b] + other.bands[b] for b in BANDS}, self.matches + other.matches
        )

    @property
    def total(self) -> DetectionTally:
        t = self.bands["low_dv"] + self.bands["high_dv"]
        # every frame is counted once per band
        t.frames = self.bands["low_dv"].frames
        t.zero_detection_frames = self.bands["low_dv"].zero_detection_frames
        return t


@dataclass
class TimingRecord:
    sequence: str
    frame: int
    stages: dict[str, float]  # milliseconds
    total: float

    def row(self) -> list:
        return [self.sequence, self.frame, *(round(self.stages.get(s, 0.0), 4) for s in STAGES), round(self.total, 4)]


# -- alignment --------------------------------------------------------------------


def group_tracks(tracks: Iterable[TrackOutput]) -> dict[int, list[TrackOutput]]:
    out: dict[int, list[TrackOutput]] = defaultdict(list)
    for tr in tracks:
        out[tr.frame].append(tr)
    return dict(out)


def check_alignment(tracks: Iterable[TrackOutput], gt: Sequence[GroundTruthFrame], tol: float = 1e-6) -> None:
    """Raise AlignmentError listing track frames with no GT frame at the same time."""
    by_frame = {g.frame: g.t for g in gt}
    bad = sorted(
        {tr.frame for tr in tracks if tr.frame not in by_frame or abs(by_frame[tr.frame] - tr.t) > tol}
    )
    if bad:
        shown = ", ".join(map(str, bad[:20])) + (" ..." if len(bad) > 20 else "")
        raise AlignmentError(f"track frames not aligned with ground truth: {shown}", bad)


# -- matching ---------------------------------------------------------------------


def greedy_match(
    gt_xy: np.ndarray, est_xy: np.ndarray, radius: float
) -> list[tuple[int, int]]:
    """One-to-one nearest-first matching of pairs closer than ``radius``.

    Ties are broken by (gt index, estimate index).
    """
    gt_xy = np.asarray(gt_xy, dtype=float).reshape(-1, 2)
    est_xy = np.asarray(est_xy, dtype=float).reshape(-1, 2)
    if len(gt_xy) == 0 or len(est_xy) == 0:
        return []
    d = np.hypot(gt_xy[:, None, 0] - est_xy[None, :, 0], gt_xy[:, None, 1] - est_xy[None, :, 1])
    gi, ei = np.nonzero(d < radius)
    order = np.lexsort((ei, gi, d[gi, ei]))
    used_g: set[int] = set()
    used_e: set[int] = set()
    pairs = []
    for k in order:
        g, e = int(gi[k]), int(ei[k])
        if g in used_g or e in used_e:
            continue
        used_g.add(g)
        used_e.add(e)
        pairs.append((g, e))
    return pairs


def _visible(obj: ObjectTruth, params: EvalParams) -> bool:
    if obj.num_points < params.min_points:
        return False
    if params.roi is not None:
        x0, x1, y0, y1 = params.roi
        if not (x0 <= obj.x <= x1 and y0 <= obj.y <= y1):
            return False
    return True


def scored_objects(
    gt: Sequence[GroundTruthFrame], params: EvalParams
) -> dict[int, tuple[list[ObjectTruth], list[ObjectTruth]]]:
    """Per frame: (scored, ignored) moving visible objects.

    Objects inside their first ``warmup_frames`` consecutive visible frames
    are ignored: tracks matching them count neither as TP nor FP.
    """
    streak: dict[int, int] = defaultdict(int)
    out = {}
    for g in sorted(gt, key=lambda f: f.frame):
        scored, ignored = [], []
        seen = set()
        for obj in g.objects:
            if not (_visible(obj, params) and obj.rel_speed > params.moving_threshold):
                continue
            seen.add(obj.id)
            streak[obj.id] += 1
            (scored if streak[obj.id] > params.warmup_frames else ignored).append(obj)
        for oid in list(streak):
            if oid not in seen:
                del streak[oid]
        out[g.frame] = (scored, ignored)
    return out


def _match_frame(tracks: list[TrackOutput], scored, ignored, params: EvalParams):
    objs = scored + ignored
    pairs = greedy_match([(o.x, o.y) for o in objs], [(t.x, t.y) for t in tracks], params.match_radius)
    return objs, pairs


def detection_scores(
    tracks: Iterable[TrackOutput], gt: Sequence[GroundTruthFrame], params: EvalParams | None = None
) -> DetectionResult:
    """TP/FP/FN tallies split by relative-speed band.

    False positives are charged to the band of the nearest ground-truth
    object in the frame (``high_dv`` when the frame has none).
    """
    params = params or EvalParams()
    params.validate()
    by_frame = group_tracks(tracks)
    result = DetectionResult()
    objects = scored_objects(gt, params)
    for g in sorted(gt, key=lambda f: f.frame):
        scored, ignored = objects[g.frame]
        trs = by_frame.get(g.frame, [])
        objs, pairs = _match_frame(trs, scored, ignored, params)
        n_scored = len(scored)
        matched_tracks = {e for _, e in pairs}
        matched_scored = set()
        for gi, ei in pairs:
            if gi < n_scored:
                obj = objs[gi]
                matched_scored.add(gi)
                result.bands[band_of(obj.dv, params.dv_split)].tp += 1
                result.matches.append((g.frame, obj.id, trs[ei].id))
        for gi, obj in enumerate(scored):
            if gi not in matched_scored:
                result.bands[band_of(obj.dv, params.dv_split)].fn += 1
        for ei, tr in enumerate(trs):
            if ei in matched_tracks:
                continue
            if g.objects:
                near = min(g.objects, key=lambda o: math.hypot(o.x - tr.x, o.y - tr.y))
                band = band_of(near.dv, params.dv_split)
            else:
                band = "high_dv"
            result.bands[band].fp += 1
        for b in BANDS:
            result.bands[b].frames += 1
        if not trs:
            for b in BANDS:
                result.bands[b].zero_detection_frames += 1
    return result


def velocity_errors(
    tracks: Iterable[TrackOutput], gt: Sequence[GroundTruthFrame], params: EvalParams | None = None
) -> tuple[list[ErrorRecord], int]:
    """Error records for every scored object matched to a track.

    Returns the records and the number of scored object-frames that had no
    matching track (skipped).
    """
    params = params or EvalParams()
    params.validate()
    by_frame = group_tracks(tracks)
    objects = scored_objects(gt, params)
    records: list[ErrorRecord] = []
    skipped = 0
    for g in sorted(gt, key=lambda f: f.frame):
        scored, ignored = objects[g.frame]
        trs = by_frame.get(g.frame, [])
        objs, pairs = _match_frame(trs, scored, ignored, params)
        matched = {gi: ei for gi, ei in pairs}
        for gi, obj in enumerate(scored):
            if gi not in matched:
                skipped += 1
                continue
            tr = trs[matched[gi]]
            records.append(error_record(g, obj, tr))
    return records, skipped


def error_record(g: GroundTruthFrame, obj: ObjectTruth, tr: TrackOutput) -> ErrorRecord:
    v_gt = math.hypot(obj.vx_rel, obj.vy_rel)
    v_est = math.hypot(tr.vx_rel, tr.vy_rel)
    return ErrorRecord(
        t=g.t,
        frame=g.frame,
        object_id=obj.id,
        track_id=tr.id,
        dv=abs(v_gt - v_est),
        dtheta=abs(float(wrap_angle(obj.theta - tr.theta))),
        l=obj.l,
        beta=obj.beta,
        delta_v=obj.dv,
    )


# -- summaries --------------------------------------------------------------------


@dataclass
class ErrorSummary:
    count: int
    sigma_v: float | None  # m/s
    sigma_theta: float | None  # degrees
    mean_v: float | None
    mean_theta: float | None  # degrees
    hist_v: tuple[list[float], list[int]] = ((), ())
    hist_theta: tuple[list[float], list[int]] = ((), ())

    @property
    def empty(self) -> bool:
        return self.count == 0


def _std(x: np.ndarray) -> float:
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def summarize(values_v: Sequence[float], values_theta_rad: Sequence[float], bins: int = 20) -> ErrorSummary:
    ev = np.asarray(values_v, dtype=float)
    et = np.rad2deg(np.asarray(values_theta_rad, dtype=float))
    if len(ev) == 0:
        return ErrorSummary(0, None, None, None, None)
    hv, ev_edges = np.histogram(ev, bins=bins)
    ht, et_edges = np.histogram(et, bins=bins)
    return ErrorSummary(
        count=len(ev),
        sigma_v=_std(ev),
        sigma_theta=_std(et),
        mean_v=float(ev.mean()),
        mean_theta=float(et.mean()),
        hist_v=(ev_edges.tolist(), hv.tolist()),
        hist_theta=(et_edges.tolist(), ht.tolist()),
    )


def error_distribution_summary(records: Sequence[ErrorRecord], dv_split: float = 1.0) -> dict[str, ErrorSummary]:
    """Summaries over all records and per relative-speed band."""
    out = {"all": summarize([r.dv for r in records], [r.dtheta for r in records])}
    for b in BANDS:
        sel = [r for r in records if band_of(r.delta_v, dv_split) == b]
        out[b] = summarize([r.dv for r in sel], [r.dtheta for r in sel])
    return out


@dataclass
class SensitivityGrid:
    beta_edges: np.ndarray  # degrees
    l_edges: np.ndarray
    sum_err: np.ndarray
    count: np.ndarray

    @property
    def mean(self) -> np.ndarray:
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(self.count > 0, self.sum_err / np.maximum(self.count, 1), 0.0)


def sensitivity_sweep(
    records: Sequence[ErrorRecord],
    beta_bin: float = 5.0,
    l_bin: float = 5.0,
    l_max: float = 120.0,
    delta_v: float | None = None,
    delta_v_tol: float = 1.0,
) -> SensitivityGrid:
    """Mean |e_v| per (beta, l) bin; out-of-range values clamp into the edge bins.

    With ``delta_v`` set, only records whose relative speed is within
    ``delta_v_tol`` of it are used.
    """
    if delta_v is not None:
        records = [r for r in records if abs(r.delta_v - delta_v) <= delta_v_tol]
    nb = int(math.ceil(180.0 / beta_bin))
    nl = int(math.ceil(l_max / l_bin))
    s = np.zeros((nb, nl))
    c = np.zeros((nb, nl), dtype=np.int64)
    for r in records:
        bi = min(max(int(math.degrees(r.beta) // beta_bin), 0), nb - 1)
        li = min(max(int(r.l // l_bin), 0), nl - 1)
        s[bi, li] += abs(r.dv)
        c[bi, li] += 1
    return SensitivityGrid(np.arange(nb + 1) * beta_bin, np.arange(nl + 1) * l_bin, s, c)


def timing_profile(records: Sequence[TimingRecord]) -> dict[str, float]:
    """Mean per-stage milliseconds, skipping each sequence's first frame."""
    first: dict[str, int] = {}
    for r in records:
        first[r.sequence] = min(first.get(r.sequence, r.frame), r.frame)
    kept = [r for r in records if r.frame != first[r.sequence]]
    out = {s: float(np.mean([r.stages.get(s, 0.0) for r in kept])) if kept else 0.0 for s in STAGES}
    out["total"] = float(np.mean([r.total for r in kept])) if kept else 0.0
    out["samples"] = len(kept)
    return out


# -- output files -----------------------------------------------------------------


def metrics_dict(
    detection: DetectionResult,
    summary: Mapping[str, ErrorSummary],
    time_ms: float | None,
) -> dict:
    """Headline table: the five metric keys for each band."""
    out = {}
    for b in BANDS:
        tally, s = detection.bands[b], summary[b]
        out[b] = {
            "precision": tally.precision,
            "recall": tally.recall,
            "sigma_v": s.sigma_v,
            "sigma_theta": s.sigma_theta,
            "time_ms": time_ms,
        }
    return out


def detail_dict(detection: DetectionResult, summary: Mapping[str, ErrorSummary]) -> dict:
    """Counts and mean errors per band plus the pooled ``all`` row."""
    out = {}
    for b in ("all", *BANDS):
        tally = detection.total if b == "all" else detection.bands[b]
        s = summary[b]
        out[b] = {
            "precision": tally.precision,
            "recall": tally.recall,
            "sigma_v": s.sigma_v,
            "sigma_theta": s.sigma_theta,
            "mean_v": s.mean_v,
            "mean_theta": s.mean_theta,
            "records": s.count,
            "tp": tally.tp,
            "fp": tally.fp,
            "fn": tally.fn,
        }
    return out


def write_metrics_json(path: str | Path, metrics: dict) -> None:
    Path(path).write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")


def write_errors_csv(path: str | Path, records: Sequence[ErrorRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "frame", "object_id", "track_id", "dv", "dtheta", "l", "beta", "delta_v"])
        for r in records:
            w.writerow([repr(r.t), r.frame, r.object_id, r.track_id, repr(r.dv), repr(r.dtheta),
                        repr(r.l), repr(r.beta), repr(r.delta_v)])


def read_errors_csv(path: str | Path) -> list[ErrorRecord]:
    with open(path, newline="") as fh:
        return [
            ErrorRecord(float(r["t"]), int(r["frame"]), int(r["object_id"]), int(r["track_id"]),
                        float(r["dv"]), float(r["dtheta"]), float(r["l"]), float(r["beta"]),
                        float(r["delta_v"]))
            for r in csv.DictReader(fh)
        ]


def write_sensitivity_csv(path: str | Path, grid: SensitivityGrid) -> None:
    mean = grid.mean
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["beta_bin", "l_bin", "mean_abs_err", "count"])
        for bi in range(grid.count.shape[0]):
            for li in range(grid.count.shape[1]):
                w.writerow([f"{grid.beta_edges[bi]:g}", f"{grid.l_edges[li]:g}",
                            repr(float(mean[bi, li])), int(grid.count[bi, li])])


def write_timing_csv(path: str | Path, records: Sequence[TimingRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sequence", "frame", *STAGES, "total"])
        for r in records:
            w.writerow(r.row())


def read_timing_csv(path: str | Path) -> list[TimingRecord]:
    with open(path, newline="") as fh:
        return [
            TimingRecord(r["sequence"], int(r["frame"]), {s: float(r[s]) for s in STAGES}, float(r["total"]))
            for r in csv.DictReader(fh)
        ]


def read_tracks_jsonl(path: str | Path) -> list[TrackOutput]:
    out = []
    with open(path) as fh:
        for line in fh:
            if line.strip():
                out.append(TrackOutput(**json.loads(line)))
    return out


def format_summary_table(metrics: dict, detail: dict | None = None) -> str:
    head = f"{'band':<8} {'Precision':>9} {'Recall':>7} {'sigma_v':>8} {'sigma_th':>8} {'time_ms':>8}"
    lines = [head]

    def f(v, spec):
        return format(v, spec) if v is not None else "-"

    rows = [(b, metrics[b]) for b in BANDS]
    if detail is not None:
        rows.append(("all", {**detail["all"], "time_ms": metrics[BANDS[0]]["time_ms"]}))
    for b, m in rows:
        lines.append(
            f"{b:<8} {f(m['precision'], '9.3f')} {f(m['recall'], '7.3f')} {f(m['sigma_v'], '8.3f')} "
            f"{f(m['sigma_theta'], '8.2f')} {f(m['time_ms'], '8.1f')}"
        )
    return "\n".join(lines)
