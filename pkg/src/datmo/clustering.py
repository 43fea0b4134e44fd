"""Spatial clustering of surviving moving cells into object measurements."""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import IO, Iterable

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .bev_grid import GridSpec
from .vector_field import FlowField


@dataclass
class Cluster:
    cells: np.ndarray  # (k, 2) int, sorted lexicographically
    centroid: tuple[float, float]
    mean_v: tuple[float, float]
    mean_omega: float
    shape: tuple[float, float]  # covariance eigenvalues, descending
    frame: float = 0.0

    @property
    def size(self) -> int:
        return len(self.cells)

    def to_json(self) -> dict:
        return {
            "frame": self.frame,
            "cells": self.cells.tolist(),
            "centroid": list(self.centroid),
            "mean_v": list(self.mean_v),
            "mean_omega": self.mean_omega,
            "lambda": list(self.shape),
        }


def shape_eigenvalues(xy: np.ndarray) -> tuple[float, float]:
    """Eigenvalues (descending, clipped at 0) of the positional covariance."""
    xy = np.asarray(xy, dtype=float)
    if len(xy) < 2:
        return (0.0, 0.0)
    d = xy - xy.mean(axis=0)
    cov = d.T @ d / len(xy)
    lam = np.linalg.eigvalsh(cov)[::-1]
    return (max(float(lam[0]), 0.0), max(float(lam[1]), 0.0))


def feature_vector(c: Cluster) -> np.ndarray:
    """Association features ``[x_m, y_m, lambda1, lambda2]``."""
    return np.array([c.centroid[0], c.centroid[1], c.shape[0], c.shape[1]])


def cluster_cells(
    field: FlowField,
    spec: GridSpec,
    link_distance: float = 0.6,
    min_cells: int = 4,
) -> list[Cluster]:
    """Single-linkage clustering of occupied cells by center distance.

    Two cells are linked when their centers are at most ``link_distance``
    apart; clusters smaller than ``min_cells`` are dropped. Output order is
    by each cluster's lowest (i, j) cell.
    """
    if not link_distance > 0:
        raise ValueError("link_distance must be positive")
    cells = np.argwhere(field.occupancy)
    if len(cells) == 0:
        return []
    xs = spec.origin[0] + spec.w * cells[:, 0]
    ys = spec.origin[1] + spec.h * cells[:, 1]
    xy = np.column_stack([xs, ys])

    pairs = cKDTree(xy).query_pairs(link_distance, output_type="ndarray")
    n = len(cells)
    graph = coo_matrix((np.ones(len(pairs)), (pairs[:, 0], pairs[:, 1])), shape=(n, n))
    _, labels = connected_components(graph, directed=False)

    # argwhere is lexicographic, so the first member of each label is its lowest cell
    _, first = np.unique(labels, return_index=True)
    out = []
    for label in labels[np.sort(first)]:
        idx = np.flatnonzero(labels == label)
        if len(idx) < min_cells:
            continue
        ci, cj = cells[idx, 0], cells[idx, 1]
        out.append(
            Cluster(
                cells=cells[idx],
                centroid=(float(xs[idx].mean()), float(ys[idx].mean())),
                mean_v=(float(field.vx[ci, cj].mean()), float(field.vy[ci, cj].mean())),
                mean_omega=float(field.omega[ci, cj].mean()),
                shape=shape_eigenvalues(xy[idx]),
                frame=field.timestamp,
            )
        )
    return out


def write_clusters_jsonl(fh: IO[str], clusters: Iterable[Cluster]) -> None:
    for c in clusters:
        fh.write(json.dumps(c.to_json()) + "\n")
