"""Spatial indexing of feature-cloud cells and neighbor-set construction.

A :class:`SpatialIndex` is built per (frame, level) over the valid cells of a
feature cloud, carrying each cell's 3D point (in the tracking coordinate
system, already scale-normalized) and its payload id (the flattened cell
index in that level's grid).  Queries return exact nearest neighbors with a
deterministic tie-break: equal distances resolve toward the smaller payload
id.  When a cloud holds fewer points than requested, the nearest entry is
repeated to full length and flagged as padding (``counts`` / ``num_real``).

:func:`fixed_2d_neighbors` is the ablation baseline that replaces 3D k-NN
with a fixed ``(2r+1) x (2r+1)`` window of grid cells around the query's
pixel cell, which ignores depth discontinuities by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigError, EmptyCloudError, ShapeError

__all__ = ["NeighborSet", "BatchedNeighbors", "SpatialIndex", "fixed_2d_neighbors"]


@dataclass
class NeighborSet:
    """Exactly K neighbors of one query point.

    ``ids`` are payload ids; ``distances`` are Euclidean and nondecreasing
    over the first ``num_real`` entries; ``offsets`` are ``neighbor - query``.
    Entries past ``num_real`` duplicate the nearest neighbor (padding).
    """

    ids: np.ndarray
    distances: np.ndarray
    offsets: np.ndarray
    num_real: int

    @property
    def k(self) -> int:
        return int(self.ids.shape[0])

    @property
    def padded(self) -> bool:
        return self.num_real < self.k


@dataclass
class BatchedNeighbors:
    """Neighbor sets for a batch of queries as flat arrays."""

    ids: np.ndarray        # (B, K) int64 payload ids
    distances: np.ndarray  # (B, K) float64
    offsets: np.ndarray    # (B, K, 3) float64, neighbor - query
    counts: np.ndarray     # (B,) int64 real (non-padding) entries per row

    @property
    def k(self) -> int:
        return int(self.ids.shape[1])

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    def row(self, i: int) -> NeighborSet:
        return NeighborSet(
            ids=self.ids[i].copy(),
            distances=self.distances[i].copy(),
            offsets=self.offsets[i].copy(),
            num_real=int(self.counts[i]),
        )


class SpatialIndex:
    """Exact k-NN index over one frame/level's valid cell points."""

    def __init__(self, points: np.ndarray, ids: np.ndarray):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        pid = np.ascontiguousarray(ids, dtype=np.int64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"points must be (N, 3), got {pts.shape}")
        if pid.shape != (pts.shape[0],):
            raise ShapeError(f"ids shape {pid.shape} does not match {pts.shape[0]} points")
        if pts.shape[0] == 0:
            raise EmptyCloudError("cannot index an empty cloud")
        if not np.all(np.isfinite(pts)):
            raise ShapeError("index points must be finite")
        if np.unique(pid).size != pid.size:
            raise ShapeError("payload ids must be unique")
        order = np.argsort(pid, kind="stable")
        self.points = pts[order]
        self.ids = pid[order]
        self._grid = kernels.grid_build(self.points)
        self._row_of_id = None  # lazy searchsorted cache base

    @property
    def size(self) -> int:
        return int(self.points.shape[0])

    def rows_for_ids(self, ids: np.ndarray) -> np.ndarray:
        """Map payload ids back to row indices of ``self.points``."""
        rows = np.searchsorted(self.ids, ids)
        return rows

    def query(self, queries: np.ndarray, k: int) -> BatchedNeighbors:
        """Batched exact k-NN: ids, distances, offsets per query point."""
        q = np.ascontiguousarray(queries, dtype=np.float64)
        if q.ndim != 2 or q.shape[1] != 3:
            raise ShapeError(f"queries must be (B, 3), got {q.shape}")
        if k < 1:
            raise ConfigError(f"k must be >= 1, got {k}")
        out_ids, d2, counts = kernels.grid_query(self.points, self.ids, self._grid, q, k)
        rows = self.rows_for_ids(out_ids.reshape(-1)).reshape(out_ids.shape)
        neighbor_pts = self.points[rows]                    # (B, K, 3)
        offsets = neighbor_pts - q[:, None, :]
        return BatchedNeighbors(
            ids=out_ids,
            distances=np.sqrt(d2),
            offsets=offsets,
            counts=counts,
        )

    def query_one(self, point: np.ndarray, k: int) -> NeighborSet:
        batch = self.query(np.asarray(point, dtype=np.float64).reshape(1, 3), k)
        return batch.row(0)


def fixed_2d_neighbors(
    coords: np.ndarray,
    valid: np.ndarray,
    query_points: np.ndarray,
    query_cells: np.ndarray,
    radius: int,
) -> BatchedNeighbors:
    """Depth-blind neighbor selection: a (2r+1)^2 pixel-grid window per query.

    ``coords``/``valid`` describe one frame/level grid (``(H, W, 3)`` points
    in the tracking coordinate system and their validity); ``query_cells``
    holds each query's ``(row, col)`` grid cell, clamped to the grid.  Window
    cells outside the grid and invalid cells are dropped, remaining neighbors
    are sorted by (distance, cell id), and rows are padded to ``(2r+1)**2``
    entries per the duplicate rule.  Offsets stay full 3D vectors, so only
    the *membership* differs from 3D k-NN.
    """
    if radius < 0:
        raise ConfigError(f"radius must be >= 0, got {radius}")
    coords = np.asarray(coords, dtype=np.float64)
    valid = np.asarray(valid, dtype=bool)
    if coords.ndim != 3 or coords.shape[2] != 3 or valid.shape != coords.shape[:2]:
        raise ShapeError(f"bad grid shapes: coords {coords.shape}, valid {valid.shape}")
    q = np.asarray(query_points, dtype=np.float64)
    cells = np.asarray(query_cells, dtype=np.int64)
    if q.ndim != 2 or q.shape[1] != 3 or cells.shape != (q.shape[0], 2):
        raise ShapeError(f"bad query shapes: points {q.shape}, cells {cells.shape}")
    h, w = valid.shape
    b = q.shape[0]
    k = (2 * radius + 1) ** 2

    steps = np.arange(-radius, radius + 1)
    rows_raw = cells[:, 0:1] + steps[None, :]                      # (B, 2r+1)
    cols_raw = cells[:, 1:2] + steps[None, :]
    rows = np.clip(rows_raw, 0, h - 1)
    cols = np.clip(cols_raw, 0, w - 1)
    in_range = (rows_raw == rows)[:, :, None] & (cols_raw == cols)[:, None, :]
    grid_rows = np.broadcast_to(rows[:, :, None], (b, steps.size, steps.size))
    grid_cols = np.broadcast_to(cols[:, None, :], (b, steps.size, steps.size))
    flat = (grid_rows * w + grid_cols).reshape(b, k)
    usable = in_range.reshape(b, k) & valid.reshape(-1)[flat]

    pts = coords.reshape(-1, 3)[flat]                              # (B, K, 3)
    diff = pts - q[:, None, :]
    d2 = np.square(diff).sum(axis=-1)
    d2 = np.where(usable, d2, np.inf)
    # window cells are enumerated in raster order (ascending flat id), so a
    # stable sort on distance breaks ties toward the smaller cell id
    order = np.argsort(d2, axis=1, kind="stable")
    flat = np.take_along_axis(flat, order, axis=1)
    d2 = np.take_along_axis(d2, order, axis=1)
    counts = usable.sum(axis=1).astype(np.int64)
    if np.any(counts == 0):
        raise EmptyCloudError("fixed 2D window contains no valid cells for some query")

    # pad dropped cells by repeating the nearest entry
    col_idx = np.arange(k)[None, :]
    pad = col_idx >= counts[:, None]
    flat = np.where(pad, flat[:, 0:1], flat)
    d2 = np.where(pad, d2[:, 0:1], d2)
    neighbor_pts = coords.reshape(-1, 3)[flat]
    offsets = neighbor_pts - q[:, None, :]
    return BatchedNeighbors(
        ids=flat.astype(np.int64),
        distances=np.sqrt(d2),
        offsets=offsets,
        counts=counts,
    )
