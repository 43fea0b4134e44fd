"""Point cloud to 2.5D bird's-eye-view grayscale grid.

Each cell holds ``255 * (a * mean(h) + b * std(h)) / h_max`` over the heights
of the points falling inside it, clamped to [0, 255]. Heights are measured
above the ground plane, i.e. ``z - z_ground`` in the sensor frame.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError


@dataclass(frozen=True)
class GridSpec:
    """Geometry and value mapping of a BEV grid.

    ``origin`` is the metric center of cell (0, 0). Axis 0 of every grid
    array runs along x (forward), axis 1 along y (left).
    """

    n: int = 1412
    m: int = 1412
    w: float = 0.17
    h: float = 0.17
    origin: tuple[float, float] = (-120.0 + 0.085, -120.0 + 0.085)
    a: float = 1.0
    b: float = 1.0
    h_max: float = 3.0
    ground_threshold: float = 25.0
    # ground plane height in the sensor frame (KITTI Velodyne mount)
    z_ground: float = -1.73
    # points higher than this above ground are dropped
    z_cap: float = 4.0

    def validate(self) -> None:
        if not (self.w > 0 and self.h > 0 and self.h_max > 0):
            raise ConfigError("grid cell size and h_max must be positive")
        if self.n <= 0 or self.m <= 0:
            raise ConfigError("grid must have at least one cell")
        if not 0 <= self.ground_threshold <= 255:
            raise ConfigError("ground_threshold must lie in [0, 255]")

    @classmethod
    def from_extent(
        cls, x_min: float, x_max: float, y_min: float, y_max: float, cell: float = 0.17, **kw
    ) -> GridSpec:
        """Grid covering the box ``[x_min, x_max) x [y_min, y_max)``."""
        n = int(np.ceil((x_max - x_min) / cell - 1e-9))
        m = int(np.ceil((y_max - y_min) / cell - 1e-9))
        return cls(n=n, m=m, w=cell, h=cell, origin=(x_min + cell / 2, y_min + cell / 2), **kw)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n, self.m)

    def cell_centers(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric (x, y) of every cell center as two n x m arrays."""
        xs = self.origin[0] + self.w * np.arange(self.n)
        ys = self.origin[1] + self.h * np.arange(self.m)
        return np.meshgrid(xs, ys, indexing="ij")


@dataclass
class BevGrid:
    values: np.ndarray
    spec: GridSpec
    timestamp: float = 0.0

    @property
    def occupancy(self) -> np.ndarray:
        return self.values > 0

    def quantized(self) -> np.ndarray:
        """8-bit brightness, round-half-up."""
        return np.floor(self.values + 0.5).clip(0, 255)


def _axis_index(p: np.ndarray, lo: float, step: float, count: int) -> np.ndarray:
    idx = np.floor((p - lo) / step).astype(np.int64)
    # exact half-open interval test against the float bounds
    idx -= (lo + idx * step) > p
    idx += (lo + (idx + 1) * step) <= p
    idx[(idx < 0) | (idx >= count)] = -1
    return idx


def cell_indices(xy: np.ndarray, spec: GridSpec) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised cell lookup; -1 marks points outside the grid."""
    xy = np.atleast_2d(np.asarray(xy, dtype=float))
    i = _axis_index(xy[:, 0], spec.origin[0] - spec.w / 2, spec.w, spec.n)
    j = _axis_index(xy[:, 1], spec.origin[1] - spec.h / 2, spec.h, spec.m)
    bad = (i < 0) | (j < 0)
    i[bad] = -1
    j[bad] = -1
    return i, j


def cell_of_point(p, spec: GridSpec) -> tuple[int, int] | None:
    i, j = cell_indices(np.asarray(p, dtype=float)[None, :2], spec)
    if i[0] < 0:
        return None
    return int(i[0]), int(j[0])


def rasterize(points: np.ndarray, spec: GridSpec, timestamp: float = 0.0) -> BevGrid:
    """Project a point cloud onto the grid; empty cells stay 0."""
    spec.validate()
    values = np.zeros(spec.shape)
    pts = np.asarray(points, dtype=float)
    if pts.size == 0:
        return BevGrid(values, spec, timestamp)
    height = pts[:, 2] - spec.z_ground
    keep = height <= spec.z_cap
    pts, height = pts[keep], height[keep]
    i, j = cell_indices(pts[:, :2], spec)
    inside = i >= 0
    flat = i[inside] * spec.m + j[inside]
    height = height[inside]
    if flat.size == 0:
        return BevGrid(values, spec, timestamp)

    # sorting makes the accumulation independent of input point order
    order = np.lexsort((height, flat))
    flat, height = flat[order], height[order]
    cells, start, counts = np.unique(flat, return_index=True, return_counts=True)
    mean = np.add.reduceat(height, start) / counts
    dev = height - np.repeat(mean, counts)
    std = np.sqrt(np.add.reduceat(dev * dev, start) / counts)

    g = 255.0 * (spec.a * mean + spec.b * std) / spec.h_max
    values.ravel()[cells] = np.clip(g, 0.0, 255.0)
    return BevGrid(values, spec, timestamp)


def remove_ground(grid: BevGrid) -> BevGrid:
    v = grid.values.copy()
    v[(v > 0) & (v <= grid.spec.ground_threshold)] = 0.0
    return BevGrid(v, grid.spec, grid.timestamp)


def crop_points(points: np.ndarray, roi: tuple[float, float, float, float]) -> np.ndarray:
    """Keep points with x_min <= x < x_max and y_min <= y < y_max."""
    x_min, x_max, y_min, y_max = roi
    p = np.asarray(points)
    keep = (p[:, 0] >= x_min) & (p[:, 0] < x_max) & (p[:, 1] >= y_min) & (p[:, 1] < y_max)
    return p[keep]


# -- file formats -----------------------------------------------------------


def read_velodyne_bin(path: str | Path) -> np.ndarray:
    """Read little-endian float32 (x, y, z, intensity) records."""
    raw = Path(path).read_bytes()
    if len(raw) % 16:
        good = len(raw) - len(raw) % 16
        raise DataError(f"{path}: truncated point record at byte offset {good} (size {len(raw)})")
    return np.frombuffer(raw, dtype="<f4").reshape(-1, 4).copy()


def write_velodyne_bin(path: str | Path, points: np.ndarray) -> None:
    pts = np.asarray(points, dtype="<f4")
    if pts.shape[1] == 3:
        pts = np.hstack([pts, np.zeros((len(pts), 1), dtype="<f4")])
    Path(path).write_bytes(np.ascontiguousarray(pts, dtype="<f4").tobytes())


def read_points_csv(path: str | Path) -> np.ndarray:
    rows = []
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().startswith("#"):
                continue
            try:
                rows.append([float(v) for v in row[:3]])
            except ValueError:
                if rows:
                    raise DataError(f"{path}: bad point row {row!r}") from None
                # header line
    return np.asarray(rows, dtype=float).reshape(-1, 3)


def read_points(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".csv":
        return read_points_csv(path)
    return read_velodyne_bin(path)[:, :3].astype(float)


def write_pgm(path: str | Path, grid: BevGrid) -> None:
    """8-bit binary PGM (P5), row-major over (i, j)."""
    img = grid.quantized().astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    Path(path).write_bytes(header + img.tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    data = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        end = pos
        while not data[end : end + 1].isspace():
            end += 1
        fields.append(data[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise DataError(f"{path}: not a binary PGM")
    width, height = int(fields[1]), int(fields[2])
    body = data[pos + 1 : pos + 1 + width * height]
    return np.frombuffer(body, dtype=np.uint8).reshape(height, width)
