"""EKF multi-object tracker: relative-kinematics motion model, GNN association
and M-of-N track management.

All quantities live in the ego-vehicle (EV) frame: x forward, y left. The
state of a target is ``[x, y, theta, v, omega]`` where ``v`` and ``theta``
are its own speed and heading and ``omega`` its own yaw rate; the EV's
``(v, omega)`` enters as a known input.
"""

from __future__ import annotations

import csv
import logging
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.optimize import linear_sum_assignment

from .clustering import Cluster, feature_vector
from .errors import ConfigError
from .vector_field import EgoState

log = logging.getLogger(__name__)

__all__ = [
    "EgoState",
    "Status",
    "Track",
    "TrackState",
    "Tracker",
    "TrackerParams",
    "associate",
    "dynamics",
    "lifecycle_step",
    "measurement_model",
    "predict",
    "update",
]

STATE_DIM = 5
MEAS_DIM = 5


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2 * np.pi) - np.pi
    w = np.where(w == -np.pi, np.pi, w)
    return float(w) if np.ndim(w) == 0 else w


class Status(str, Enum):
    TENTATIVE = "tentative"
    CONFIRMED = "confirmed"
    DELETED = "deleted"


@dataclass(frozen=True)
class TrackerParams:
    gamma: float = 4.0
    M1: int = 3
    N1: int = 5
    M2: int = 4
    N2: int = 5
    q_a: float = 2.0
    q_alpha: float = 0.5
    R: tuple[float, ...] = (0.09, 0.09, 0.25, 0.25, 0.04)
    P0: tuple[float, ...] = (1.0, 1.0, float(np.deg2rad(30.0) ** 2), 4.0, 0.25)
    # per-component scale of the association features [x, y, l1, l2]
    feature_weights: tuple[float, float, float, float] = (1.0, 1.0, 1.0, 1.0)

    def validate(self) -> None:
        if not self.gamma > 0:
            raise ConfigError("gamma must be positive")
        if not (0 < self.M1 <= self.N1 and 0 < self.M2 <= self.N2):
            raise ConfigError("lifecycle counts need 0 < M <= N")

    @property
    def R_matrix(self) -> np.ndarray:
        R = np.asarray(self.R, dtype=float)
        return np.diag(R) if R.ndim == 1 else R.reshape(MEAS_DIM, MEAS_DIM)


@dataclass
class TrackState:
    X: np.ndarray
    P: np.ndarray

    def copy(self) -> TrackState:
        return TrackState(self.X.copy(), self.P.copy())


@dataclass
class Track:
    id: int
    state: TrackState
    status: Status = Status.TENTATIVE
    history: deque = field(default_factory=deque)
    last_update: float = 0.0
    shape: tuple[float, float] = (0.0, 0.0)
    hits: int = 0
    age: int = 0

    def copy(self) -> Track:
        return replace(self, state=self.state.copy(), history=deque(self.history, self.history.maxlen))

    def features(self) -> np.ndarray:
        X = self.state.X
        return np.array([X[0], X[1], self.shape[0], self.shape[1]])


# -- motion model -------------------------------------------------------------


def dynamics(X: np.ndarray, ego: EgoState) -> np.ndarray:
    x, y, th, v, w = X
    return np.array(
        [
            v * np.cos(th) - ego.v + ego.omega * y,
            v * np.sin(th) - ego.omega * x,
            w - ego.omega,
            0.0,
            0.0,
        ]
    )


def dynamics_jacobian(X: np.ndarray, ego: EgoState) -> np.ndarray:
    _, _, th, v, _ = X
    c, s = np.cos(th), np.sin(th)
    return np.array(
        [
            [0.0, ego.omega, -v * s, c, 0.0],
            [-ego.omega, 0.0, v * c, s, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0],
        ]
    )


def integrate(X: np.ndarray, ego: EgoState, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """One RK4 step of the mean together with its exact Jacobian.

    The Jacobian comes from running the same RK4 stages on the variational
    equation, so it is the derivative of the discrete map itself.
    """
    X = np.asarray(X, dtype=float)
    Phi = np.eye(STATE_DIM)
    k1 = dynamics(X, ego)
    K1 = dynamics_jacobian(X, ego) @ Phi
    X2 = X + 0.5 * dt * k1
    k2 = dynamics(X2, ego)
    K2 = dynamics_jacobian(X2, ego) @ (Phi + 0.5 * dt * K1)
    X3 = X + 0.5 * dt * k2
    k3 = dynamics(X3, ego)
    K3 = dynamics_jacobian(X3, ego) @ (Phi + 0.5 * dt * K2)
    X4 = X + dt * k3
    k4 = dynamics(X4, ego)
    K4 = dynamics_jacobian(X4, ego) @ (Phi + dt * K3)
    Xn = X + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    F = Phi + dt / 6.0 * (K1 + 2 * K2 + 2 * K3 + K4)
    return Xn, F


def process_noise(F: np.ndarray, dt: float, params: TrackerParams) -> np.ndarray:
    """Trapezoidal discretisation of white acceleration / yaw-acceleration noise."""
    Qc = np.zeros((STATE_DIM, STATE_DIM))
    Qc[3, 3] = params.q_a
    Qc[4, 4] = params.q_alpha
    return 0.5 * dt * (Qc + F @ Qc @ F.T)


def _symmetrize(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + P.T)


def predict(track: Track, ego: EgoState, dt: float, params: TrackerParams) -> Track:
    if not dt > 0:
        raise ValueError("dt must be positive")
    X, F = integrate(track.state.X, ego, dt)
    X[2] = wrap_angle(X[2])
    P = _symmetrize(F @ track.state.P @ F.T + process_noise(F, dt, params))
    out = track.copy()
    out.state = TrackState(X, P)
    return out


# -- measurement model --------------------------------------------------------


def measurement_model(state: TrackState | np.ndarray, ego: EgoState) -> tuple[np.ndarray, np.ndarray]:
    """Predicted ``[x, y, vx_rel, vy_rel, omega_rel]`` and its Jacobian."""
    X = state.X if isinstance(state, TrackState) else np.asarray(state, dtype=float)
    x, y, th, v, w = X
    c, s = np.cos(th), np.sin(th)
    z = np.array([x, y, v * c - ego.v + ego.omega * y, v * s - ego.omega * x, w - ego.omega])
    H = np.array(
        [
            [1.0, 0.0, 0.0, 0.0, 0.0],
            [0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, ego.omega, -v * s, c, 0.0],
            [-ego.omega, 0.0, v * c, s, 0.0],
            [0.0, 0.0, 0.0, 0.0, 1.0],
        ]
    )
    return z, H


def cluster_measurement(cluster: Cluster) -> np.ndarray:
    return np.array(
        [cluster.centroid[0], cluster.centroid[1], cluster.mean_v[0], cluster.mean_v[1], cluster.mean_omega]
    )


class UpdateSkipped(Exception):
    """The innovation covariance could not be factorised."""


def update(track: Track, cluster: Cluster, ego: EgoState, params: TrackerParams) -> Track:
    """EKF correction with the cluster's mean position and velocities.

    Raises ``UpdateSkipped`` when the innovation covariance is singular; the
    caller records a miss instead.
    """
    X, P = track.state.X, track.state.P
    z = cluster_measurement(cluster)
    zp, H = measurement_model(X, ego)
    S = _symmetrize(H @ P @ H.T + params.R_matrix)
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError as exc:
        raise UpdateSkipped(str(exc)) from exc
    # K = P H^T S^-1 via the Cholesky factor
    PHt = P @ H.T
    K = np.linalg.solve(L.T, np.linalg.solve(L, PHt.T)).T
    Xn = X + K @ (z - zp)
    Xn[2] = wrap_angle(Xn[2])
    I_KH = np.eye(STATE_DIM) - K @ H
    Pn = _symmetrize(I_KH @ P @ I_KH.T + K @ params.R_matrix @ K.T)
    out = track.copy()
    out.state = TrackState(Xn, Pn)
    out.shape = cluster.shape
    out.last_update = cluster.frame
    return out


# -- association ----------------------------------------------------------------


@dataclass
class Assignment:
    pairs: list[tuple[int, int]]
    unassigned_tracks: list[int]
    unassigned_clusters: list[int]


def feature_distances(tracks: list[Track], clusters: list[Cluster], params: TrackerParams) -> np.ndarray:
    wts = np.asarray(params.feature_weights, dtype=float)
    if not tracks or not clusters:
        return np.zeros((len(tracks), len(clusters)))
    tf = np.array([t.features() for t in tracks]) * wts
    cf = np.array([feature_vector(c) for c in clusters]) * wts
    return np.linalg.norm(tf[:, None, :] - cf[None, :, :], axis=-1)


def assignment_cost(D: np.ndarray, pairs: list[tuple[int, int]], gamma: float) -> float:
    """Total GNN cost: matched distances plus gamma/2 per unmatched track or cluster."""
    n, m = D.shape
    matched = sum(D[i, j] for i, j in pairs)
    return float(matched + 0.5 * gamma * (n + m - 2 * len(pairs)))


def solve_assignment(D: np.ndarray, gamma: float) -> list[tuple[int, int]]:
    """Optimal one-to-one matching of the gated pairs (distance < gamma).

    Leaving a track and a cluster unmatched costs gamma, so minimising
    ``assignment_cost`` is the same as minimising the sum of ``d - gamma``
    over matched pairs.
    """
    if D.size == 0:
        return []
    gain = np.minimum(D - gamma, 0.0)
    rows, cols = linear_sum_assignment(gain)
    return sorted((int(i), int(j)) for i, j in zip(rows, cols) if D[i, j] < gamma)


def associate(tracks: list[Track], clusters: list[Cluster], params: TrackerParams) -> Assignment:
    D = feature_distances(tracks, clusters, params)
    pairs = solve_assignment(D, params.gamma)
    ti = {i for i, _ in pairs}
    cj = {j for _, j in pairs}
    return Assignment(
        pairs,
        [i for i in range(len(tracks)) if i not in ti],
        [j for j in range(len(clusters)) if j not in cj],
    )


# -- lifecycle ------------------------------------------------------------------


def lifecycle_step(track: Track, hit: bool, params: TrackerParams) -> Track:
    """Record a hit or miss and apply the M-of-N confirmation / deletion rules."""
    if track.status is Status.DELETED:
        raise ValueError("track already deleted")
    out = track.copy()
    if out.history.maxlen is None:
        out.history = deque(out.history, maxlen=max(params.N1, params.N2))
    out.history.append(bool(hit))
    out.age += 1
    out.hits += int(hit)
    recent = list(out.history)
    if out.status is Status.TENTATIVE:
        window = recent[-params.N1 :]
        if sum(window) >= params.M1:
            out.status = Status.CONFIRMED
        elif len(window) >= params.N1 and not any(window):
            out.status = Status.DELETED
    elif out.status is Status.CONFIRMED:
        window = recent[-params.N2 :]
        if len(window) - sum(window) >= params.M2:
            out.status = Status.DELETED
    return out


# -- tracker --------------------------------------------------------------------


def initial_state(cluster: Cluster, ego: EgoState, params: TrackerParams) -> TrackState:
    x, y = cluster.centroid
    vx = cluster.mean_v[0] + ego.v - ego.omega * y
    vy = cluster.mean_v[1] + ego.omega * x
    X = np.array([x, y, np.arctan2(vy, vx), np.hypot(vx, vy), cluster.mean_omega + ego.omega])
    X[2] = wrap_angle(X[2])
    return TrackState(X, np.diag(np.asarray(params.P0, dtype=float)))


@dataclass
class TrackOutput:
    """One emitted track state, relative and absolute kinematics."""

    t: float
    frame: int
    id: int
    x: float
    y: float
    theta: float
    v: float
    omega: float
    status: str
    vx_rel: float
    vy_rel: float
    omega_rel: float

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


class Tracker:
    """Stateful per-sequence tracker; ``step`` must be called in time order."""

    def __init__(self, params: TrackerParams | None = None):
        self.params = params or TrackerParams()
        self.params.validate()
        self.tracks: list[Track] = []
        self._next_id = 1
        self._t: float | None = None
        self.skipped_updates = 0

    def step(
        self, clusters: list[Cluster], ego: EgoState, t: float, frame: int = 0
    ) -> list[TrackOutput]:
        p = self.params
        if self._t is not None:
            dt = t - self._t
            if not dt > 0:
                raise ValueError(f"timestamps must increase (got {t} after {self._t})")
            self.tracks = [predict(tr, ego, dt, p) for tr in self.tracks]
        self._t = t

        assignment = associate(self.tracks, clusters, p)
        survivors = []
        for i, tr in enumerate(self.tracks):
            hit = False
            match = [j for ti, j in assignment.pairs if ti == i]
            if match:
                try:
                    tr = update(tr, clusters[match[0]], ego, p)
                    hit = True
                except UpdateSkipped as exc:
                    self.skipped_updates += 1
                    log.warning("track %d: update skipped (%s)", tr.id, exc)
            tr = lifecycle_step(tr, hit, p)
            if tr.status is not Status.DELETED:
                survivors.append(tr)

        for j in assignment.unassigned_clusters:
            c = clusters[j]
            tr = Track(
                id=self._next_id,
                state=initial_state(c, ego, p),
                history=deque(maxlen=max(p.N1, p.N2)),
                last_update=t,
                shape=c.shape,
            )
            self._next_id += 1
            survivors.append(lifecycle_step(tr, True, p))
        self.tracks = survivors
        return [self._emit(tr, ego, t, frame) for tr in self.tracks if tr.status is Status.CONFIRMED]

    @staticmethod
    def _emit(tr: Track, ego: EgoState, t: float, frame: int) -> TrackOutput:
        X = tr.state.X
        z, _ = measurement_model(X, ego)
        return TrackOutput(
            t=float(t), frame=int(frame), id=tr.id,
            x=float(X[0]), y=float(X[1]), theta=float(X[2]), v=float(X[3]), omega=float(X[4]),
            status=tr.status.value,
            vx_rel=float(z[2]), vy_rel=float(z[3]), omega_rel=float(z[4]),
        )


TRACK_COLUMNS = tuple(TrackOutput.__dataclass_fields__)


def write_tracks_csv(path, tracks) -> None:
    """Tabular form of the JSONL track output, same field order."""
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(TRACK_COLUMNS)
        for tr in tracks:
            out.writerow([repr(v) if isinstance(v, float) else v for v in (getattr(tr, k) for k in TRACK_COLUMNS)])


def track_step(
    tracker: Tracker, clusters: list[Cluster], ego: EgoState, t: float, frame: int = 0
) -> tuple[list[Track], list[TrackOutput]]:
    out = tracker.step(clusters, ego, t, frame)
    return tracker.tracks, out
