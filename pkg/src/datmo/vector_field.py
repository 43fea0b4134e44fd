"""Velocity vector field post-processing.

Angular velocity from half the curl, the rigid-body continuity mask
(divergence and curl gradient both near zero), the temporal propagation
mask (previous field advected by its own velocities must agree with the
current one), and ego-motion compensation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .bev_grid import GridSpec
from .errors import ConfigError


@dataclass(frozen=True)
class EgoState:
    v: float = 0.0
    omega: float = 0.0


@dataclass(frozen=True)
class MaskParams:
    alpha_p: float = 1.0
    alpha_cont: float = 2.0
    dt: float = 0.1
    # ego-compensated speed below which a cell counts as static
    min_speed: float = 2.0

    def validate(self) -> None:
        if not (self.alpha_p > 0 and self.alpha_cont > 0):
            raise ConfigError("mask thresholds must be positive")
        if not self.dt > 0:
            raise ConfigError("dt must be positive")
        if self.min_speed < 0:
            raise ConfigError("min_speed must be nonnegative")


@dataclass
class FlowField:
    """Per-cell planar velocity [m/s] and yaw rate [rad/s] on a grid."""

    vx: np.ndarray
    vy: np.ndarray
    omega: np.ndarray
    occupancy: np.ndarray
    timestamp: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return self.vx.shape

    @property
    def speed(self) -> np.ndarray:
        return np.hypot(self.vx, self.vy)


@dataclass
class Propagated:
    """Previous field re-anchored at its predicted cells."""

    vx: np.ndarray
    vy: np.ndarray
    present: np.ndarray
    collisions: int = 0
    exits: int = 0


def _ddx(f: np.ndarray, spec: GridSpec) -> np.ndarray:
    return np.gradient(f, spec.w, axis=0) if f.shape[0] > 1 else np.zeros_like(f)


def _ddy(f: np.ndarray, spec: GridSpec) -> np.ndarray:
    return np.gradient(f, spec.h, axis=1) if f.shape[1] > 1 else np.zeros_like(f)


def curl(vx: np.ndarray, vy: np.ndarray, spec: GridSpec) -> np.ndarray:
    return _ddx(vy, spec) - _ddy(vx, spec)


def divergence(vx: np.ndarray, vy: np.ndarray, spec: GridSpec) -> np.ndarray:
    return _ddx(vx, spec) + _ddy(vy, spec)


def curl_half(vx: np.ndarray, vy: np.ndarray, spec: GridSpec) -> np.ndarray:
    """Rigid-body yaw rate, ``0.5 * (dvy/dx - dvx/dy)``."""
    vx = np.asarray(vx, dtype=float)
    vy = np.asarray(vy, dtype=float)
    if vx.shape != vy.shape:
        raise ValueError("velocity grids are not conformable")
    return 0.5 * curl(vx, vy, spec)


def make_field(
    vx: np.ndarray, vy: np.ndarray, spec: GridSpec, occupancy: np.ndarray, timestamp: float = 0.0
) -> FlowField:
    vx = np.asarray(vx, dtype=float)
    vy = np.asarray(vy, dtype=float)
    return FlowField(vx, vy, curl_half(vx, vy, spec), np.asarray(occupancy, dtype=bool), timestamp)


def continuity_mask(field: FlowField, spec: GridSpec, params: MaskParams) -> np.ndarray:
    """Cells whose divergence and curl-gradient magnitude are both within alpha_cont."""
    div = divergence(field.vx, field.vy, spec)
    c = curl(field.vx, field.vy, spec)
    grad_curl = np.hypot(_ddx(c, spec), _ddy(c, spec))
    return (np.abs(div) <= params.alpha_cont) & (grad_curl <= params.alpha_cont)


def propagate(field_prev: FlowField, spec: GridSpec, params: MaskParams) -> Propagated:
    """Move each occupied vector by its own displacement over one step.

    The offset ``floor(v * dt + w / 2)`` is evaluated in cell units, i.e.
    ``floor(v * dt / w + 1 / 2)``: the displacement rounded to the nearest
    cell. When several vectors land on one cell the larger magnitude wins;
    ties go to the lowest (i, j) source.
    """
    H, W = field_prev.shape
    src = np.argwhere(field_prev.occupancy)
    vx = np.zeros((H, W))
    vy = np.zeros((H, W))
    present = np.zeros((H, W), dtype=bool)
    if len(src) == 0:
        return Propagated(vx, vy, present)
    si, sj = src[:, 0], src[:, 1]
    svx = field_prev.vx[si, sj]
    svy = field_prev.vy[si, sj]
    ti = si + np.floor(svx * params.dt / spec.w + 0.5).astype(np.int64)
    tj = sj + np.floor(svy * params.dt / spec.h + 0.5).astype(np.int64)
    inside = (ti >= 0) & (ti < H) & (tj >= 0) & (tj < W)
    exits = int(np.count_nonzero(~inside))
    si, sj, ti, tj, svx, svy = (a[inside] for a in (si, sj, ti, tj, svx, svy))

    mag = np.hypot(svx, svy)
    order = np.lexsort((sj, si, -mag))
    target = (ti * W + tj)[order]
    _, first = np.unique(target, return_index=True)
    keep = order[first]
    collisions = len(order) - len(keep)
    vx[ti[keep], tj[keep]] = svx[keep]
    vy[ti[keep], tj[keep]] = svy[keep]
    present[ti[keep], tj[keep]] = True
    return Propagated(vx, vy, present, collisions, exits)


def propagation_mask(propagated: Propagated, current: FlowField, params: MaskParams) -> np.ndarray:
    """Occupied cells where the advected previous vector agrees with the current one."""
    diff = np.hypot(propagated.vx - current.vx, propagated.vy - current.vy)
    return propagated.present & current.occupancy & (diff <= params.alpha_p)


def apply_mask(field: FlowField, mc: np.ndarray, mp: np.ndarray) -> FlowField:
    keep = np.asarray(mc, dtype=bool) & np.asarray(mp, dtype=bool)
    return FlowField(
        np.where(keep, field.vx, 0.0),
        np.where(keep, field.vy, 0.0),
        np.where(keep, field.omega, 0.0),
        field.occupancy & keep,
        field.timestamp,
    )


def ego_motion_compensate(field: FlowField, ego: EgoState, spec: GridSpec) -> FlowField:
    """Remove the apparent motion the ego vehicle induces on static cells.

    A static point at r reads ``-v_ego - omega_ego x r`` in the ego frame;
    that term is subtracted. The yaw rate grid gains ``omega_ego`` because
    the removed field has curl ``-2 omega_ego``.
    """
    if not (np.isfinite(ego.v) and np.isfinite(ego.omega)):
        raise ValueError("ego state must be finite")
    x, y = spec.cell_centers()
    return replace(
        field,
        vx=field.vx + ego.v - ego.omega * y,
        vy=field.vy + ego.omega * x,
        omega=field.omega + ego.omega,
    )


def write_field_csv(
    path: str | Path,
    field: FlowField,
    mc: np.ndarray | None = None,
    mp: np.ndarray | None = None,
) -> None:
    """Debug dump of the occupied cells."""
    ones = np.ones(field.shape, dtype=bool)
    mc = ones if mc is None else mc
    mp = ones if mp is None else mp
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["i", "j", "vx", "vy", "omega", "mc", "mp"])
        for i, j in np.argwhere(field.occupancy):
            out.writerow(
                [i, j, repr(float(field.vx[i, j])), repr(float(field.vy[i, j])),
                 repr(float(field.omega[i, j])), int(mc[i, j]), int(mp[i, j])]
            )
