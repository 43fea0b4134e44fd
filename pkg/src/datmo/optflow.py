"""Dense two-frame optical flow by polynomial expansion (Farneback).

Every cell's neighbourhood is approximated by a quadratic polynomial
``f(x) = x^T A x + b^T x + c``. For a pure translation ``d`` between two
frames the coefficients satisfy ``A d = -(b2 - b1) / 2``; the displacement
is recovered from window-averaged versions of that relation, iterated with
the second frame's expansion re-sampled at the current estimate, and run
coarse-to-fine over an image pyramid.

Displacements are in cells per frame. ``dx`` runs along array axis 0 (x),
``dy`` along axis 1 (y).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy import ndimage

from .bev_grid import BevGrid, GridSpec
from .errors import ConfigError

# polynomial basis order: 1, x, y, x^2, y^2, xy
_N_BASIS = 6


@dataclass(frozen=True)
class FlowParams:
    num_pyramid_levels: int = 3
    pyramid_scale: float = 0.5
    num_iterations: int = 3
    # half-width of the expansion window (window spans 2n+1 cells)
    neighborhood_size: int = 3
    filter_size: int = 11
    applicability_sigma: float = 0.9
    pyramid_sigma: float = 1.0
    certainty_weighting: bool = True

    def validate(self) -> None:
        if self.num_pyramid_levels < 1:
            raise ConfigError("num_pyramid_levels must be >= 1")
        if not 0 < self.pyramid_scale < 1:
            raise ConfigError("pyramid_scale must lie in (0, 1)")
        if self.num_iterations < 1:
            raise ConfigError("num_iterations must be >= 1")
        if self.neighborhood_size < 3 or self.neighborhood_size % 2 == 0:
            raise ConfigError("neighborhood_size must be odd and >= 3")
        if self.filter_size < 1 or self.filter_size % 2 == 0:
            raise ConfigError("filter_size must be a positive odd integer")
        if self.applicability_sigma <= 0:
            raise ConfigError("applicability_sigma must be positive")


@dataclass
class DisplacementField:
    dx: np.ndarray
    dy: np.ndarray
    valid: np.ndarray

    @classmethod
    def zeros(cls, shape: tuple[int, int]) -> DisplacementField:
        return cls(np.zeros(shape), np.zeros(shape), np.ones(shape, dtype=bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.dx.shape


class PolyExpansion(NamedTuple):
    A: np.ndarray  # (..., 2, 2) symmetric
    b: np.ndarray  # (..., 2)
    c: np.ndarray


def applicability(n: int, sigma: float) -> np.ndarray:
    x = np.arange(-n, n + 1, dtype=float)
    g = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return g / g.sum()


def _basis(n: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x, y = np.meshgrid(np.arange(-n, n + 1.0), np.arange(-n, n + 1.0), indexing="ij")
    B = np.stack([np.ones_like(x), x, y, x * x, y * y, x * y], axis=-1)
    return x, y, B


def _gram_inverse(n: int, sigma: float) -> np.ndarray:
    g = applicability(n, sigma)
    _, _, B = _basis(n)
    W = np.outer(g, g)
    G = np.einsum("xy,xyp,xyq->pq", W, B, B)
    return np.linalg.inv(G)


def _expand(img: np.ndarray, n: int, sigma: float) -> np.ndarray:
    """Coefficients r (6, H, W) of the weighted least-squares quadratic fit."""
    g = applicability(n, sigma)
    x = np.arange(-n, n + 1, dtype=float)
    xg, xxg = x * g, x * x * g
    corr = ndimage.correlate1d
    t_g = corr(img, g, axis=1, mode="nearest")
    t_x = corr(img, xg, axis=1, mode="nearest")
    t_xx = corr(img, xxg, axis=1, mode="nearest")
    moments = np.stack(
        [
            corr(t_g, g, axis=0, mode="nearest"),
            corr(t_g, xg, axis=0, mode="nearest"),
            corr(t_x, g, axis=0, mode="nearest"),
            corr(t_g, xxg, axis=0, mode="nearest"),
            corr(t_xx, g, axis=0, mode="nearest"),
            corr(t_x, xg, axis=0, mode="nearest"),
        ]
    )
    Ginv = _gram_inverse(n, sigma)
    return np.tensordot(Ginv, moments, axes=(1, 0))


def polynomial_expansion(image: np.ndarray, params: FlowParams | None = None) -> PolyExpansion:
    """Per-cell quadratic model of the brightness image."""
    params = params or FlowParams()
    params.validate()
    img = np.asarray(image, dtype=float)
    n = params.neighborhood_size
    if min(img.shape) < 2 * n + 1:
        raise ConfigError(f"grid {img.shape} smaller than the {2 * n + 1}-cell expansion window")
    r = _expand(img, n, params.applicability_sigma)
    A = np.empty(img.shape + (2, 2))
    A[..., 0, 0] = r[3]
    A[..., 1, 1] = r[4]
    A[..., 0, 1] = A[..., 1, 0] = 0.5 * r[5]
    b = np.stack([r[1], r[2]], axis=-1)
    return PolyExpansion(A, b, r[0])


def _content_window(mask: np.ndarray, margin: int) -> tuple[slice, slice] | None:
    """Bounding box of ``mask`` grown by ``margin`` cells, clipped to the array."""
    rows = np.flatnonzero(mask.any(axis=1))
    if rows.size == 0:
        return None
    cols = np.flatnonzero(mask.any(axis=0))
    H, W = mask.shape
    return (
        slice(max(0, rows[0] - margin), min(H, rows[-1] + margin + 1)),
        slice(max(0, cols[0] - margin), min(W, cols[-1] + margin + 1)),
    )


def _expand_sparse(img: np.ndarray, n: int, sigma: float) -> np.ndarray:
    """As ``_expand`` but skips the empty part of the image.

    Correlating zeros gives exact zeros, so restricting the work to the
    content window (plus the kernel half-width) changes no value.
    """
    out = np.zeros((_N_BASIS,) + img.shape)
    win = _content_window(img != 0, n + 1)
    if win is not None:
        out[(slice(None),) + win] = _expand(img[win], n, sigma)
    return out


# -- resampling -----------------------------------------------------------------


def _resample_axis(a: np.ndarray, new_len: int, axis: int) -> np.ndarray:
    """Linear resampling along one axis with cell-center alignment."""
    old_len = a.shape[axis]
    if new_len == old_len:
        return a
    u = (np.arange(new_len) + 0.5) * (old_len / new_len) - 0.5
    u = np.clip(u, 0, old_len - 1)
    i0 = np.minimum(np.floor(u).astype(np.intp), max(old_len - 2, 0))
    f = u - i0
    i1 = np.minimum(i0 + 1, old_len - 1)
    shape = [1] * a.ndim
    shape[axis] = new_len
    f = f.reshape(shape)
    return np.take(a, i0, axis=axis) * (1 - f) + np.take(a, i1, axis=axis) * f


def _resize(a: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    return _resample_axis(_resample_axis(a, shape[0], 0), shape[1], 1)


def build_pyramid(img: np.ndarray, params: FlowParams) -> list[np.ndarray]:
    levels = [img]
    for _ in range(1, params.num_pyramid_levels):
        prev = levels[-1]
        shape = (
            max(1, int(round(prev.shape[0] * params.pyramid_scale))),
            max(1, int(round(prev.shape[1] * params.pyramid_scale))),
        )
        if min(shape) < 2 * params.neighborhood_size + 1:
            break
        blurred = np.zeros_like(prev)
        win = _content_window(prev != 0, int(4 * params.pyramid_sigma + 0.5) + 1)
        if win is not None:
            blurred[win] = ndimage.gaussian_filter(prev[win], params.pyramid_sigma, mode="nearest")
        levels.append(_resize(blurred, shape))
    return levels


# -- displacement estimation ------------------------------------------------------


def _warp_coeffs(
    R1: np.ndarray, ii: np.ndarray, jj: np.ndarray, dx: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Bilinearly sample R1 (H, W, k) at (ii + dx, jj + dy); returns values and in-bounds mask."""
    H, W, k = R1.shape
    px = ii + dx
    py = jj + dy
    inside = (px >= 0) & (px <= H - 1) & (py >= 0) & (py <= W - 1)
    px = np.clip(px, 0, H - 1)
    py = np.clip(py, 0, W - 1)
    x0 = np.minimum(px.astype(np.intp), max(H - 2, 0))
    y0 = np.minimum(py.astype(np.intp), max(W - 2, 0))
    fx = (px - x0)[..., None]
    fy = (py - y0)[..., None]
    x1 = np.minimum(x0 + 1, H - 1)
    y1 = np.minimum(y0 + 1, W - 1)
    flat = R1.reshape(-1, k)
    v00 = flat[x0 * W + y0]
    v01 = flat[x0 * W + y1]
    v10 = flat[x1 * W + y0]
    v11 = flat[x1 * W + y1]
    out = (v00 * (1 - fy) + v01 * fy) * (1 - fx) + (v10 * (1 - fy) + v11 * fy) * fx
    return out, inside


def _level_flow(
    R0: np.ndarray,
    R1: np.ndarray,
    dx: np.ndarray,
    dy: np.ndarray,
    weight: np.ndarray | None,
    params: FlowParams,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Iterative refinement at one pyramid level.

    R0, R1 hold (b_x, b_y, a_xx, a_yy, a_xy) per cell with shape (H, W, 5).
    With a certainty weight only cells of nonzero weight contribute, so the
    per-cell products are evaluated on that support and scattered back.
    """
    H, W = dx.shape
    size = params.filter_size
    if weight is None:
        support = np.arange(H * W)
        wsup = None
    else:
        support = np.flatnonzero(weight)
        wsup = weight.ravel()[support]
    ii = (support // W).astype(float)
    jj = (support % W).astype(float)
    r0 = R0.reshape(-1, 5)[support]
    if support.size == 0:
        window = None
    elif weight is None:
        window = (slice(0, H), slice(0, W))
    else:
        window = _content_window(weight != 0, size // 2 + 1)
    det = np.zeros((H, W))
    for _ in range(params.num_iterations):
        sx = dx.ravel()[support]
        sy = dy.ravel()[support]
        r1, inside = _warp_coeffs(R1, ii, jj, sx, sy)
        a00 = 0.5 * (r0[:, 2] + r1[:, 2])
        a11 = 0.5 * (r0[:, 3] + r1[:, 3])
        a01 = 0.25 * (r0[:, 4] + r1[:, 4])
        bx = -0.5 * (r1[:, 0] - r0[:, 0]) + a00 * sx + a01 * sy
        by = -0.5 * (r1[:, 1] - r0[:, 1]) + a01 * sx + a11 * sy
        w = inside.astype(float)
        if wsup is not None:
            w *= wsup
        M = np.zeros((5, H * W))
        M[0, support] = (a00 * a00 + a01 * a01) * w
        M[1, support] = a01 * (a00 + a11) * w
        M[2, support] = (a01 * a01 + a11 * a11) * w
        M[3, support] = (a00 * bx + a01 * by) * w
        M[4, support] = (a01 * bx + a11 * by) * w
        M = M.reshape(5, H, W)
        # outside the support window every product is zero, hence so is the flow
        dx = np.zeros((H, W))
        dy = np.zeros((H, W))
        det = np.zeros((H, W))
        if window is None:
            continue
        Mw = ndimage.uniform_filter(M[(slice(None),) + window], size=(1, size, size), mode="nearest")
        g11, g12, g22, h1, h2 = Mw
        dw = g11 * g22 - g12 * g12
        idet = 1.0 / (dw + 1e-3)
        det[window] = dw
        dx[window] = (g22 * h1 - g12 * h2) * idet
        dy[window] = (g11 * h2 - g12 * h1) * idet
    return dx, dy, det


def _coeff_stack(img: np.ndarray, params: FlowParams) -> np.ndarray:
    r = _expand_sparse(img, params.neighborhood_size, params.applicability_sigma)
    return np.ascontiguousarray(np.moveaxis(r[1:], 0, -1))


@dataclass
class FramePyramid:
    """Pyramid levels of one frame with their expansion coefficients."""

    levels: list[np.ndarray]
    coeffs: list[np.ndarray]

    @classmethod
    def build(cls, img: np.ndarray, params: FlowParams) -> FramePyramid:
        levels = build_pyramid(np.asarray(img, dtype=float), params)
        return cls(levels, [_coeff_stack(level, params) for level in levels])


def flow_between(
    p0: FramePyramid,
    p1: FramePyramid,
    params: FlowParams,
    prior: DisplacementField | None = None,
) -> DisplacementField:
    """Coarse-to-fine displacement between two prepared pyramids."""
    shape = p0.levels[0].shape
    top = p0.levels[-1].shape
    if prior is not None:
        if prior.shape != shape:
            raise ValueError("prior field shape does not match the frames")
        dx = _resize(prior.dx, top) * (top[0] / shape[0])
        dy = _resize(prior.dy, top) * (top[1] / shape[1])
    else:
        dx = np.zeros(top)
        dy = np.zeros(top)

    det = np.zeros(top)
    for level in range(len(p0.levels) - 1, -1, -1):
        img0 = p0.levels[level]
        if dx.shape != img0.shape:
            sx = img0.shape[0] / dx.shape[0]
            sy = img0.shape[1] / dx.shape[1]
            dx = _resize(dx, img0.shape) * sx
            dy = _resize(dy, img0.shape) * sy
        weight = (img0 > 0).astype(float) if params.certainty_weighting else None
        dx, dy, det = _level_flow(p0.coeffs[level], p1.coeffs[level], dx, dy, weight, params)

    valid = det > 1e-3
    band = params.neighborhood_size
    valid[:band, :] = False
    valid[-band:, :] = False
    valid[:, :band] = False
    valid[:, -band:] = False
    return DisplacementField(dx, dy, valid)


def estimate_flow_arrays(
    prev: np.ndarray,
    curr: np.ndarray,
    params: FlowParams | None = None,
    prior: DisplacementField | None = None,
) -> DisplacementField:
    """Dense displacement mapping ``prev`` onto ``curr`` (both brightness arrays)."""
    params = params or FlowParams()
    params.validate()
    prev = np.asarray(prev, dtype=float)
    curr = np.asarray(curr, dtype=float)
    if prev.shape != curr.shape:
        raise ValueError(f"frame shapes differ: {prev.shape} vs {curr.shape}")
    n = params.neighborhood_size
    if min(prev.shape) < 2 * n + 1:
        raise ConfigError(f"grid {prev.shape} smaller than the {2 * n + 1}-cell expansion window")

    return flow_between(FramePyramid.build(prev, params), FramePyramid.build(curr, params), params, prior)


def estimate_flow(
    prev: BevGrid,
    curr: BevGrid,
    params: FlowParams | None = None,
    prior: DisplacementField | None = None,
) -> DisplacementField:
    """Dense flow between two BEV grids sharing one GridSpec."""
    if prev.spec != curr.spec:
        raise ValueError("grids were rasterized with different GridSpecs")
    return estimate_flow_arrays(prev.quantized(), curr.quantized(), params, prior)


def displacement_to_velocity(
    field: DisplacementField, spec: GridSpec, dt: float = 0.1
) -> tuple[np.ndarray, np.ndarray]:
    """Convert cells/frame to m/s."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    return field.dx * spec.w / dt, field.dy * spec.h / dt


def write_flow_csv(path: str | Path, field: DisplacementField, only_valid: bool = False) -> None:
    with open(path, "w", newline="") as fh:
        out = csv.writer(fh)
        out.writerow(["i", "j", "dx", "dy", "valid"])
        idx = np.argwhere(field.valid) if only_valid else np.ndindex(field.shape)
        for i, j in idx:
            out.writerow([i, j, repr(float(field.dx[i, j])), repr(float(field.dy[i, j])), int(field.valid[i, j])])
