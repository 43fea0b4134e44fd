"""Synthetic highway scenarios with a ray-cast spinning LiDAR.

One target vehicle (TV) drives on a multi-lane road of constant curvature
next to the ego vehicle (EV). Road geometry uses Frenet coordinates
``(s, d)`` about the EV's lane center: ``s`` is arc length, ``d`` the
lateral offset (left positive). With curvature ``k > 0`` the road bends
left around the center ``(0, 1/k)``.

Point clouds and ground truth are expressed in the EV sensor frame: x
forward, y left, z up with the origin at the sensor, so the ground lies at
``z = -mount_height``.
"""

from __future__ import annotations

import csv
import itertools
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator

import numpy as np
from scipy import integrate

from ._dc import from_dict, to_dict
from .bev_grid import write_velodyne_bin
from .errors import ConfigError
from .vector_field import EgoState

TV_DIMENSIONS = {
    "sedan": (4.7, 1.8, 1.4),
    "van": (5.4, 2.0, 2.2),
    "cyclist": (1.8, 0.6, 1.7),
}


@dataclass(frozen=True)
class LidarSpec:
    channels: int = 64
    vertical_fov: tuple[float, float] = (-24.8, 2.0)
    horizontal_resolution: float = 0.2
    rate: float = 10.0
    max_range: float = 120.0
    noise_sigma: float = 0.02
    mount_height: float = 1.73

    def validate(self) -> None:
        if not (self.rate > 0 and self.max_range > 0):
            raise ConfigError("lidar rate and max_range must be positive")
        if self.channels < 1 or self.horizontal_resolution <= 0:
            raise ConfigError("lidar needs >= 1 channel and a positive horizontal resolution")

    def elevations(self) -> np.ndarray:
        lo, hi = np.deg2rad(self.vertical_fov)
        if self.channels == 1:
            return np.array([0.5 * (lo + hi)])
        return np.linspace(hi, lo, self.channels)

    def azimuths(self) -> np.ndarray:
        count = int(round(360.0 / self.horizontal_resolution))
        return np.deg2rad(np.arange(count) * self.horizontal_resolution - 180.0)


@dataclass(frozen=True)
class RoadSpec:
    curvature: float = 1.0 / 500.0
    lane_width: float = 3.5
    num_lanes: int = 3


@dataclass(frozen=True)
class Maneuver:
    """``keep`` or ``lane_change``: shift by ``n`` over ``s`` seconds, hold, shift back, repeat."""

    kind: str = "keep"
    s: float = 2.0
    n: float | None = None  # defaults to lane_width / 2
    hold: float | None = None  # defaults to s
    start: float = 0.0


@dataclass(frozen=True)
class TargetSpec:
    type: str = "sedan"
    dimensions: tuple[float, float, float] | None = None  # length, width, height
    speed: float = 25.0
    lateral_offset: float = 3.5
    # initial arc-length position relative to the EV; None picks a passing geometry
    start_gap: float | None = None
    maneuver: Maneuver = field(default_factory=Maneuver)

    @property
    def size(self) -> tuple[float, float, float]:
        if self.dimensions is not None:
            return tuple(self.dimensions)
        try:
            return TV_DIMENSIONS[self.type]
        except KeyError:
            raise ConfigError(f"unknown target type {self.type!r}") from None


@dataclass(frozen=True)
class ScenarioSpec:
    road: RoadSpec = field(default_factory=RoadSpec)
    ev_speed: float = 20.0
    ev_lane: int = 0
    tv: TargetSpec = field(default_factory=TargetSpec)
    duration: float = 8.0
    lidar: LidarSpec = field(default_factory=LidarSpec)
    seed: int = 0
    name: str = ""

    @classmethod
    def from_dict(cls, data: dict) -> ScenarioSpec:
        return from_dict(cls, data)

    def to_dict(self) -> dict:
        return to_dict(self)

    def validate(self) -> None:
        self.lidar.validate()
        if self.duration <= 0:
            raise ConfigError("duration must be positive")
        m = self.tv.maneuver
        if m.kind not in ("keep", "lane_change"):
            raise ConfigError(f"unknown maneuver {m.kind!r}")
        if m.kind == "lane_change" and not m.s > 0:
            raise ConfigError("lane_change needs a positive duration s")
        if m.kind == "lane_change" and self.tv.type == "cyclist":
            raise ConfigError("cyclists only keep their lane")
        curvature = self.road.curvature
        if curvature and abs(self.tv.lateral_offset) * abs(curvature) >= 0.5:
            raise ConfigError("lateral offset too large for the road curvature")
        self.tv.size  # noqa: B018  (raises on unknown type)

    @property
    def num_frames(self) -> int:
        return int(round(self.duration * self.lidar.rate))


# -- trajectories ---------------------------------------------------------------


def quintic(u):
    """Smoothstep with zero velocity and acceleration at both ends."""
    u = np.clip(u, 0.0, 1.0)
    return u**3 * (10 - 15 * u + 6 * u * u)


def quintic_d1(u):
    inside = (u > 0) & (u < 1)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 30 * u**2 * (1 - u) ** 2, 0.0)


def quintic_d2(u):
    inside = (u > 0) & (u < 1)
    u = np.clip(u, 0.0, 1.0)
    return np.where(inside, 60 * u * (1 - u) * (1 - 2 * u), 0.0)


def lateral_profile(m: Maneuver, lane_width: float, t: float) -> tuple[float, float, float]:
    """Lateral offset from the start lane and its first two time derivatives."""
    if m.kind == "keep":
        return 0.0, 0.0, 0.0
    n = lane_width / 2 if m.n is None else m.n
    hold = m.s if m.hold is None else m.hold
    tau = t - m.start
    if tau <= 0:
        return 0.0, 0.0, 0.0
    period = 2 * (m.s + hold)
    phase = tau % period
    if phase < m.s:
        u, sign, base = phase / m.s, 1.0, 0.0
    elif phase < m.s + hold:
        return n, 0.0, 0.0
    elif phase < 2 * m.s + hold:
        u, sign, base = (phase - m.s - hold) / m.s, -1.0, n
    else:
        return 0.0, 0.0, 0.0
    return (
        float(base + sign * n * quintic(u)),
        float(sign * n * quintic_d1(u) / m.s),
        float(sign * n * quintic_d2(u) / m.s**2),
    )


def frenet_to_world(s: float, d: float, curvature: float) -> tuple[float, float, float]:
    """Position and road-tangent heading of Frenet point (s, d)."""
    if curvature == 0:
        return s, d, 0.0
    r = 1.0 / curvature
    phi = s * curvature
    return np.sin(phi) * (r - d), r - np.cos(phi) * (r - d), phi


@dataclass
class Pose:
    x: float
    y: float
    heading: float
    vx: float
    vy: float
    yaw_rate: float

    @property
    def speed(self) -> float:
        return float(np.hypot(self.vx, self.vy))


class Trajectory:
    """Time-parameterised world pose of the TV (constant speed along its path)."""

    def __init__(self, spec: ScenarioSpec):
        spec.validate()
        self.spec = spec
        self.k = spec.road.curvature
        self.s0 = default_start_gap(spec) if spec.tv.start_gap is None else spec.tv.start_gap

    def lateral(self, t: float) -> tuple[float, float, float]:
        dd, dd1, dd2 = lateral_profile(self.spec.tv.maneuver, self.spec.road.lane_width, t)
        return self.spec.tv.lateral_offset + dd, dd1, dd2

    def _s_rate(self, t: float) -> float:
        d, _, _ = self.lateral(t)
        return self.spec.tv.speed / (1.0 - self.k * d)

    def arc_length(self, t: float) -> float:
        if self.spec.tv.maneuver.kind == "keep" or self.k == 0:
            return self.s0 + self._s_rate(0.0) * t if self.k else self.s0 + self.spec.tv.speed * t
        val, _ = integrate.quad(self._s_rate, 0.0, t, limit=200, epsabs=1e-12, epsrel=1e-12)
        return self.s0 + val

    def pose(self, t: float) -> Pose:
        v = self.spec.tv.speed
        d, d1, d2 = self.lateral(t)
        s = self.arc_length(t)
        x, y, phi = frenet_to_world(s, d, self.k)
        sdot = v / (1.0 - self.k * d)
        # velocity: tangent component v, normal component d1
        tx, ty = np.cos(phi), np.sin(phi)
        nx, ny = -np.sin(phi), np.cos(phi)
        vx = v * tx + d1 * nx
        vy = v * ty + d1 * ny
        heading = phi + np.arctan2(d1, v)
        yaw_rate = self.k * sdot + v * d2 / (v * v + d1 * d1)
        return Pose(float(x), float(y), float(heading), float(vx), float(vy), float(yaw_rate))


def ev_pose(spec: ScenarioSpec, t: float) -> Pose:
    k = spec.road.curvature
    d = spec.ev_lane * spec.road.lane_width
    rate = spec.ev_speed / (1.0 - k * d)
    x, y, phi = frenet_to_world(rate * t, d, k)
    return Pose(
        float(x), float(y), float(phi),
        float(spec.ev_speed * np.cos(phi)), float(spec.ev_speed * np.sin(phi)),
        float(k * rate),
    )


def default_start_gap(spec: ScenarioSpec) -> float:
    """Start position giving a pass-by without driving through the EV."""
    dv = spec.tv.speed - spec.ev_speed
    same_lane = abs(spec.tv.lateral_offset - spec.ev_lane * spec.road.lane_width) < spec.road.lane_width
    if same_lane:
        return 20.0 if dv >= 0 else -20.0
    return -dv * spec.duration / 2


def build_trajectory(spec: ScenarioSpec) -> Trajectory:
    return Trajectory(spec)


# -- ground truth ---------------------------------------------------------------


@dataclass
class ObjectTruth:
    id: int
    type: str
    x: float
    y: float
    theta: float
    length: float
    width: float
    height: float
    vx_abs: float
    vy_abs: float
    vx_rel: float
    vy_rel: float
    yaw_rate: float
    yaw_rate_rel: float
    l: float
    beta: float
    dv: float
    num_points: int = 0

    @property
    def rel_speed(self) -> float:
        return float(np.hypot(self.vx_rel, self.vy_rel))


@dataclass
class GroundTruthFrame:
    t: float
    frame: int
    ego_v: float
    ego_omega: float
    objects: list[ObjectTruth]

    def to_json(self) -> dict:
        return to_dict(self)

    @classmethod
    def from_json(cls, data: dict) -> GroundTruthFrame:
        objs = [ObjectTruth(**o) for o in data.get("objects", [])]
        return cls(data["t"], data["frame"], data["ego_v"], data["ego_omega"], objs)


def relative_truth(tv: Pose, ev: Pose, dims, kind: str, obj_id: int = 1) -> ObjectTruth:
    c, s = np.cos(ev.heading), np.sin(ev.heading)
    dx, dy = tv.x - ev.x, tv.y - ev.y
    x = c * dx + s * dy
    y = -s * dx + c * dy
    vxa = c * tv.vx + s * tv.vy
    vya = -s * tv.vx + c * tv.vy
    w = ev.yaw_rate
    evs = ev.speed
    vx_rel = vxa - evs + w * y
    vy_rel = vya - w * x
    theta = float(np.angle(np.exp(1j * (tv.heading - ev.heading))))
    beta = abs(float(np.angle(np.exp(1j * (theta - np.arctan2(y, x))))))
    return ObjectTruth(
        id=obj_id, type=kind, x=float(x), y=float(y), theta=theta,
        length=dims[0], width=dims[1], height=dims[2],
        vx_abs=float(vxa), vy_abs=float(vya),
        vx_rel=float(vx_rel), vy_rel=float(vy_rel),
        yaw_rate=tv.yaw_rate, yaw_rate_rel=tv.yaw_rate - w,
        l=float(np.hypot(x, y)), beta=beta, dv=float(np.hypot(vxa - evs, vya)),
    )


# -- ray casting ----------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Upright box in the sensor frame: center (x, y), yaw, size; sits on the ground."""

    x: float
    y: float
    yaw: float
    length: float
    width: float
    height: float


def ray_directions(lidar: LidarSpec) -> np.ndarray:
    """Unit ray directions ordered by channel, then azimuth."""
    el = lidar.elevations()[:, None]
    az = lidar.azimuths()[None, :]
    d = np.stack(
        [np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.broadcast_to(np.sin(el), (el.size, az.size))],
        axis=-1,
    )
    return d.reshape(-1, 3)


def ray_box_distance(dirs: np.ndarray, box: Box, ground_z: float) -> np.ndarray:
    """Distance from the origin along each ray to the box (inf when missed)."""
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    o = np.array([-box.x, -box.y, -(ground_z + box.height / 2)])
    o_local = np.array([c * o[0] + s * o[1], -s * o[0] + c * o[1], o[2]])
    d_local = np.column_stack([c * dirs[:, 0] + s * dirs[:, 1], -s * dirs[:, 0] + c * dirs[:, 1], dirs[:, 2]])
    half = np.array([box.length, box.width, box.height]) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d_local
        t1 = (-half - o_local) * inv
        t2 = (half - o_local) * inv
    # rays parallel to a slab: inside -> unbounded, outside -> miss
    parallel = d_local == 0
    inside_slab = np.abs(o_local) <= half
    lo = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), np.minimum(t1, t2))
    hi = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), np.maximum(t1, t2))
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_near <= t_far) & (t_near > 0)
    return np.where(hit, t_near, np.inf)


def raycast_frame(
    boxes: list[Box],
    lidar: LidarSpec,
    rng: np.random.Generator | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Cast every ray against a flat ground and the boxes.

    Returns points ``(k, 3)`` and, per point, the index of the box hit
    (``-1`` for ground). Order follows the rays: channel, then azimuth.
    """
    dirs = ray_directions(lidar)
    ground_z = -lidar.mount_height
    with np.errstate(divide="ignore"):
        t_ground = np.where(dirs[:, 2] < 0, ground_z / dirs[:, 2], np.inf)
    best = t_ground
    label = np.full(len(dirs), -1)
    for k, box in enumerate(boxes):
        tb = ray_box_distance(dirs, box, ground_z)
        closer = tb < best
        best = np.where(closer, tb, best)
        label[closer] = k
    keep = best <= lidar.max_range
    r = best[keep]
    if rng is not None and lidar.noise_sigma > 0:
        r = r + rng.normal(0.0, lidar.noise_sigma, size=r.shape)
        # noise may not push a return past the range limit
        r = np.minimum(r, lidar.max_range)
    return dirs[keep] * r[:, None], label[keep]


# -- scenario runs --------------------------------------------------------------


@dataclass
class SimFrame:
    index: int
    t: float
    points: np.ndarray
    ego: EgoState
    truth: GroundTruthFrame


def frame_truth(spec: ScenarioSpec, traj: Trajectory, index: int) -> tuple[GroundTruthFrame, Box]:
    t = index / spec.lidar.rate
    ev = ev_pose(spec, t)
    tv = traj.pose(t)
    obj = relative_truth(tv, ev, spec.tv.size, spec.tv.type)
    box = Box(obj.x, obj.y, obj.theta, obj.length, obj.width, obj.height)
    return GroundTruthFrame(float(t), index, ev.speed, ev.yaw_rate, [obj]), box


def run_scenario(spec: ScenarioSpec) -> Iterator[SimFrame]:
    """Frames at the LiDAR rate over the scenario duration."""
    traj = build_trajectory(spec)
    for index in range(spec.num_frames):
        truth, box = frame_truth(spec, traj, index)
        rng = np.random.default_rng([spec.seed, index])
        points, label = raycast_frame([box], spec.lidar, rng)
        truth.objects[0].num_points = int(np.count_nonzero(label == 0))
        ego = EgoState(truth.ego_v, truth.ego_omega)
        yield SimFrame(index, truth.t, points, ego, truth)


def sweep_configurations(
    base: ScenarioSpec,
    speeds: list[float] | None = None,
    offsets: list[float] | None = None,
    maneuvers: list[Maneuver] | None = None,
    tv_types: list[str] | None = None,
    decimate: int = 1,
) -> list[ScenarioSpec]:
    """Cartesian product of TV type x maneuver x speed x lateral offset.

    Defaults are the full grid: speeds 10..40 step 2, offsets -80..80 step
    1, keep-lane plus lane changes of 2 s and 4 s, three vehicle types.
    Cyclists only keep their lane. ``decimate`` keeps every k-th spec.
    """
    speeds = list(np.arange(10.0, 40.0 + 1e-9, 2.0)) if speeds is None else list(speeds)
    offsets = list(np.arange(-80.0, 80.0 + 1e-9, 1.0)) if offsets is None else list(offsets)
    maneuvers = (
        [Maneuver("keep"), Maneuver("lane_change", s=2.0), Maneuver("lane_change", s=4.0)]
        if maneuvers is None
        else list(maneuvers)
    )
    tv_types = ["sedan", "van", "cyclist"] if tv_types is None else list(tv_types)
    if not (speeds and offsets and maneuvers and tv_types):
        raise ValueError("sweep ranges must be nonempty")
    if decimate < 1:
        raise ValueError("decimate must be >= 1")
    out = []
    for kind, man, speed, off in itertools.product(tv_types, maneuvers, speeds, offsets):
        if kind == "cyclist" and man.kind != "keep":
            continue
        tv = replace(base.tv, type=kind, speed=float(speed), lateral_offset=float(off), maneuver=man)
        name = f"{kind}_{man.kind}{'' if man.kind == 'keep' else int(man.s)}_v{speed:g}_d{off:g}"
        out.append(replace(base, tv=tv, name=name))
    return out[::decimate]


# -- dataset files ----------------------------------------------------------------


def write_scenario(spec: ScenarioSpec, out_dir: str | Path) -> Path:
    """Write frames/NNNNNN.bin, ego.csv, gt.jsonl and scenario.json."""
    out = Path(out_dir)
    frames = out / "frames"
    frames.mkdir(parents=True, exist_ok=True)
    (out / "scenario.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    with open(out / "ego.csv", "w", newline="") as ego_fh, open(out / "gt.jsonl", "w") as gt_fh:
        ego_csv = csv.writer(ego_fh)
        ego_csv.writerow(["t", "v", "omega"])
        for fr in run_scenario(spec):
            write_velodyne_bin(frames / f"{fr.index:06d}.bin", fr.points)
            ego_csv.writerow([repr(fr.t), repr(fr.ego.v), repr(fr.ego.omega)])
            gt_fh.write(json.dumps(fr.truth.to_json()) + "\n")
    return out


def read_ego_csv(path: str | Path) -> list[tuple[float, EgoState]]:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            rows.append((float(row["t"]), EgoState(float(row["v"]), float(row["omega"]))))
    return rows


def read_gt_jsonl(path: str | Path) -> list[GroundTruthFrame]:
    with open(path) as fh:
        return [GroundTruthFrame.from_json(json.loads(line)) for line in fh if line.strip()]
