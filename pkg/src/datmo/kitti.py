"""KITTI tracking sequence ingestion.

Layout of one sequence directory::

    velodyne/NNNNNN.bin   float32 x, y, z, intensity (little-endian)
    label_02/SSSS.txt     tracking labels (optional)
    calib/SSSS.txt        calibration, Tr_velo_to_cam and R0_rect
    ego.csv               optional t, v, omega per frame

Labeled boxes are moved into the LiDAR frame by inverting the rectified
velo-to-cam transform.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

from .bev_grid import read_velodyne_bin
from .errors import DataError
from .simulator import GroundTruthFrame, ObjectTruth
from .vector_field import EgoState

log = logging.getLogger(__name__)

KEPT_CLASSES = ("Car", "Van", "Cyclist")
FRAME_RATE = 10.0


@dataclass(frozen=True)
class Calibration:
    tr_velo_to_cam: np.ndarray  # (3, 4)
    r0_rect: np.ndarray  # (3, 3)

    def velo_to_rect(self) -> np.ndarray:
        """4x4 homogeneous transform from LiDAR to rectified camera coordinates."""
        T = np.eye(4)
        T[:3, :] = self.tr_velo_to_cam
        R = np.eye(4)
        R[:3, :3] = self.r0_rect
        return R @ T

    def rect_to_velo(self) -> np.ndarray:
        M = self.velo_to_rect()
        if abs(np.linalg.det(M)) < 1e-12:
            raise DataError("calibration transform is singular")
        return np.linalg.inv(M)


@dataclass(frozen=True)
class Label:
    frame: int
    track_id: int
    type: str
    dimensions: tuple[float, float, float]  # h, w, l
    location: tuple[float, float, float]  # bottom center, rectified camera frame
    rotation_y: float


@dataclass(frozen=True)
class Box3D:
    """Labeled box in the LiDAR frame (center of the volume)."""

    track_id: int
    type: str
    x: float
    y: float
    z: float
    yaw: float
    length: float
    width: float
    height: float


@dataclass
class KittiFrameBundle:
    frame: int
    t: float
    points: np.ndarray | None  # None when the frame file is corrupt
    boxes: list[Box3D]
    ego: EgoState
    error: str | None = None


_CALIB_KEYS = {
    "Tr_velo_to_cam": "tr",
    "Tr_velo_cam": "tr",
    "R0_rect": "r0",
    "R_rect": "r0",
}


def read_calibration(path: str | Path) -> Calibration:
    """Parse a calibration file; both ``key: values`` and ``key values`` lines work."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"missing calibration file {path}")
    found: dict[str, np.ndarray] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.replace(":", " ", 1).split()
        if not parts or parts[0] not in _CALIB_KEYS:
            continue
        try:
            found[_CALIB_KEYS[parts[0]]] = np.array([float(v) for v in parts[1:]])
        except ValueError:
            raise DataError(f"{path}:{lineno}: non-numeric calibration value") from None
    if "tr" not in found:
        raise DataError(f"{path}: no Tr_velo_to_cam entry")
    if found["tr"].size != 12:
        raise DataError(f"{path}: Tr_velo_to_cam needs 12 values")
    r0 = found.get("r0", np.eye(3).ravel())
    if r0.size != 9:
        raise DataError(f"{path}: R0_rect needs 9 values")
    calib = Calibration(found["tr"].reshape(3, 4), r0.reshape(3, 3))
    calib.rect_to_velo()
    return calib


def read_labels(path: str | Path, classes: tuple[str, ...] = KEPT_CLASSES) -> dict[int, list[Label]]:
    """Tracking labels grouped by frame, filtered to ``classes``."""
    out: dict[int, list[Label]] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split()
        if not parts:
            continue
        if len(parts) < 17:
            raise DataError(f"{path}:{lineno}: expected 17 label fields, got {len(parts)}")
        if parts[2] not in classes:
            continue
        try:
            nums = [float(v) for v in parts[10:17]]
            lab = Label(int(parts[0]), int(parts[1]), parts[2], tuple(nums[0:3]), tuple(nums[3:6]), nums[6])
        except ValueError:
            raise DataError(f"{path}:{lineno}: malformed label") from None
        out.setdefault(lab.frame, []).append(lab)
    return out


def label_to_box(label: Label, calib: Calibration) -> Box3D:
    h, w, l = label.dimensions
    M = calib.rect_to_velo()
    # camera y points down; the label gives the bottom-face center
    center_cam = np.array([label.location[0], label.location[1] - h / 2, label.location[2], 1.0])
    cx, cy, cz = (M @ center_cam)[:3]
    ry = label.rotation_y
    heading_cam = np.array([np.cos(ry), 0.0, -np.sin(ry)])
    hx, hy, _ = M[:3, :3] @ heading_cam
    return Box3D(label.track_id, label.type, float(cx), float(cy), float(cz),
                 float(np.arctan2(hy, hx)), l, w, h)


def read_ego_csv(path: str | Path) -> dict[int, EgoState]:
    """Ego motion keyed by frame index; the frame is ``round(t * 10)``."""
    out = {}
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            frame = int(row["frame"]) if "frame" in row else int(round(float(row["t"]) * FRAME_RATE))
            out[frame] = EgoState(float(row["v"]), float(row["omega"]))
    return out


def _sequence_id(seq_dir: Path) -> str:
    calib_dir = seq_dir / "calib"
    files = sorted(calib_dir.glob("*.txt")) if calib_dir.is_dir() else []
    if not files:
        raise DataError(f"missing calibration under {calib_dir}")
    if len(files) > 1:
        raise DataError(f"{calib_dir}: expected one calibration file, found {len(files)}")
    return files[0].stem


def parse_kitti(seq_dir: str | Path, ego_csv: str | Path | None = None) -> Iterator[KittiFrameBundle]:
    """Stream frames of one sequence in index order.

    A corrupt velodyne file yields a bundle with ``points=None`` and the
    error text; the caller decides whether to skip it.
    """
    seq_dir = Path(seq_dir)
    seq = _sequence_id(seq_dir)
    calib = read_calibration(seq_dir / "calib" / f"{seq}.txt")
    label_path = seq_dir / "label_02" / f"{seq}.txt"
    labels = read_labels(label_path) if label_path.exists() else {}
    ego_path = Path(ego_csv) if ego_csv else seq_dir / "ego.csv"
    if ego_path.exists():
        ego = read_ego_csv(ego_path)
    else:
        log.warning("no ego motion for %s; assuming a stationary sensor", seq_dir)
        ego = {}
    files = sorted((seq_dir / "velodyne").glob("*.bin"))
    if not files:
        raise DataError(f"no velodyne frames under {seq_dir / 'velodyne'}")
    for f in files:
        try:
            frame = int(f.stem)
        except ValueError:
            raise DataError(f"unexpected frame file name {f.name}") from None
        boxes = [label_to_box(lab, calib) for lab in labels.get(frame, [])]
        try:
            pts, err = read_velodyne_bin(f), None
        except DataError as exc:
            pts, err = None, str(exc)
        yield KittiFrameBundle(frame, frame / FRAME_RATE, pts, boxes, ego.get(frame, EgoState()), err)


def points_in_box(points: np.ndarray, box: Box3D, margin: float = 0.1) -> int:
    """Points inside the box grown by ``margin``; surface returns sit on the faces."""
    d = points[:, :3] - np.array([box.x, box.y, box.z])
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    u = c * d[:, 0] + s * d[:, 1]
    v = -s * d[:, 0] + c * d[:, 1]
    inside = (
        (np.abs(u) <= box.length / 2 + margin)
        & (np.abs(v) <= box.width / 2 + margin)
        & (np.abs(d[:, 2]) <= box.height / 2 + margin)
    )
    return int(np.count_nonzero(inside))


def ground_truth_from_labels(bundles: list[KittiFrameBundle]) -> list[GroundTruthFrame]:
    """Ground truth with box-center velocities by finite differences.

    Central differences where the track exists in both neighbouring frames,
    one-sided otherwise; a track seen in one frame only gets zero velocity.
    These velocities are approximate (box jitter is differentiated too).
    """
    index = {(b.frame, box.track_id): box for b in bundles for box in b.boxes}
    out = []
    for b in bundles:
        objs = []
        for box in b.boxes:
            prev = index.get((b.frame - 1, box.track_id))
            nxt = index.get((b.frame + 1, box.track_id))
            if prev and nxt:
                vx, vy = (nxt.x - prev.x) * FRAME_RATE / 2, (nxt.y - prev.y) * FRAME_RATE / 2
            elif nxt:
                vx, vy = (nxt.x - box.x) * FRAME_RATE, (nxt.y - box.y) * FRAME_RATE
            elif prev:
                vx, vy = (box.x - prev.x) * FRAME_RATE, (box.y - prev.y) * FRAME_RATE
            else:
                vx = vy = 0.0
            e = b.ego
            vxa = vx + e.v - e.omega * box.y
            vya = vy + e.omega * box.x
            bearing = np.arctan2(box.y, box.x)
            beta = abs(float(np.angle(np.exp(1j * (box.yaw - bearing)))))
            npts = points_in_box(b.points, box) if b.points is not None else 0
            objs.append(ObjectTruth(
                id=box.track_id, type=box.type, x=box.x, y=box.y, theta=box.yaw,
                length=box.length, width=box.width, height=box.height,
                vx_abs=float(vxa), vy_abs=float(vya), vx_rel=float(vx), vy_rel=float(vy),
                yaw_rate=0.0, yaw_rate_rel=-e.omega,
                l=float(np.hypot(box.x, box.y)), beta=beta,
                dv=float(np.hypot(vxa - e.v, vya)), num_points=npts,
            ))
        out.append(GroundTruthFrame(b.t, b.frame, b.ego.v, b.ego.omega, objs))
    return out


def write_calibration(path: str | Path, calib: Calibration) -> None:
    """Write in the tracking-benchmark style (``key values`` without colon)."""
    def fmt(a):
        return " ".join(f"{v:.12e}" for v in np.asarray(a).ravel())

    Path(path).write_text(f"R_rect {fmt(calib.r0_rect)}\nTr_velo_cam {fmt(calib.tr_velo_to_cam)}\n")


def box_to_label(box: Box3D, frame: int, calib: Calibration) -> str:
    """Inverse of :func:`label_to_box`, formatted as a tracking label line."""
    M = calib.velo_to_rect()
    cx, cy, cz = (M @ np.array([box.x, box.y, box.z, 1.0]))[:3]
    hx, _, hz = M[:3, :3] @ np.array([np.cos(box.yaw), np.sin(box.yaw), 0.0])
    ry = float(np.arctan2(-hz, hx))
    return (f"{frame} {box.track_id} {box.type} 0 0 0 0 0 0 0 "
            f"{box.height:.6f} {box.width:.6f} {box.length:.6f} "
            f"{cx:.6f} {cy + box.height / 2:.6f} {cz:.6f} {ry:.6f}")
