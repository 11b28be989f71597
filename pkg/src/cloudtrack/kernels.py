"""Exact k-nearest-neighbour kernel backends.

Two interchangeable implementations answer batched exact k-NN queries with a
deterministic tie-break (smaller payload id wins on equal squared distance):

* ``compiled`` - a Cython uniform-grid kernel (``cloudtrack._gridknn``) that
  expands Chebyshev rings of grid cells around each query and stops once the
  retained worst candidate provably beats every unvisited ring;
* ``python`` - vectorized numpy brute force with a stable argsort.

Both produce bit-identical ids and squared distances: squared distances
accumulate x, y, z in the same order, and both select by ``(d2, id)``.
The backend is chosen at import time; set ``CLOUDTRACK_FORCE_PYTHON=1`` to
force the numpy path even when the extension is built.
"""

from __future__ import annotations

import os

import numpy as np

from .errors import ConfigError, ShapeError

try:
    from . import _gridknn as _compiled
except ImportError:  # pragma: no cover - depends on build environment
    _compiled = None

_FORCED_PYTHON = os.environ.get("CLOUDTRACK_FORCE_PYTHON", "").strip() not in ("", "0")

ACTIVE_BACKEND = "compiled" if (_compiled is not None and not _FORCED_PYTHON) else "python"

# target mean points per grid cell and a hard per-axis resolution cap
_CELL_TARGET = 2.0
_MAX_CELLS_PER_AXIS = 96


def compiled_available() -> bool:
    return _compiled is not None


def grid_build(points: np.ndarray):
    """Build the uniform-grid acceleration structure over ``points``.

    ``points`` must be float64 ``(N, 3)`` sorted by payload id (the caller
    guarantees this; cells then hold ascending ids).  Returns
    ``(mins, cell, dims, cell_start, point_row)`` where ``cell_start`` is the
    CSR offset array over flattened cells and ``point_row`` lists point rows
    grouped by cell, ascending id within each cell.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"points must be (N, 3), got {pts.shape}")
    n = pts.shape[0]
    if n == 0:
        raise ShapeError("cannot build a grid over zero points")
    mins = pts.min(axis=0)
    ext = pts.max(axis=0) - mins
    positive = ext[ext > 0]
    if positive.size == 0:
        cell = 1.0
    else:
        cell = float((np.prod(positive) * _CELL_TARGET / n) ** (1.0 / positive.size))
        if cell <= 0 or not np.isfinite(cell):
            cell = float(positive.max()) or 1.0
    dims = np.clip(np.floor(ext / cell).astype(np.int64) + 1, 1, _MAX_CELLS_PER_AXIS)

    cell_of = np.clip(np.floor((pts - mins) / cell).astype(np.int64), 0, dims - 1)
    flat = (cell_of[:, 0] * dims[1] + cell_of[:, 1]) * dims[2] + cell_of[:, 2]
    ncells = int(dims[0] * dims[1] * dims[2])
    counts = np.bincount(flat, minlength=ncells)
    cell_start = np.zeros(ncells + 1, dtype=np.int64)
    np.cumsum(counts, out=cell_start[1:])
    point_row = np.argsort(flat, kind="stable").astype(np.int64)
    return mins, cell, dims.astype(np.int64), cell_start, point_row


def brute_query(points: np.ndarray, ids: np.ndarray, queries: np.ndarray, k: int):
    """Vectorized exact k-NN with the canonical tie-break.

    ``points`` must be sorted ascending by ``ids`` so a stable sort on squared
    distance breaks ties toward the smaller payload id.  Returns
    ``(ids (B,k) int64, d2 (B,k) float64, counts (B,) int64)`` where rows with
    fewer than ``k`` points are padded by repeating the nearest entry.
    """
    pts = np.ascontiguousarray(points, dtype=np.float64)
    ids = np.ascontiguousarray(ids, dtype=np.int64)
    q = np.ascontiguousarray(queries, dtype=np.float64)
    _validate_query_args(pts, ids, q, k)
    n = pts.shape[0]
    b = q.shape[0]
    kk = min(k, n)

    out_ids = np.empty((b, k), dtype=np.int64)
    out_d2 = np.empty((b, k), dtype=np.float64)
    chunk = max(1, int(4e7 / max(n, 1)))
    for lo in range(0, b, chunk):
        hi = min(b, lo + chunk)
        diff = q[lo:hi, None, :] - pts[None, :, :]
        d2 = np.square(diff).sum(axis=-1)
        # rows are in ascending-id order, so a stable sort on d2 breaks
        # distance ties toward the smaller payload id (argpartition would not:
        # it splits boundary ties arbitrarily)
        order = np.argsort(d2, axis=1, kind="stable")[:, :kk]
        out_d2[lo:hi, :kk] = np.take_along_axis(d2, order, axis=1)
        out_ids[lo:hi, :kk] = ids[order]
    counts = np.full(b, kk, dtype=np.int64)
    if kk < k:
        out_ids[:, kk:] = out_ids[:, :1]
        out_d2[:, kk:] = out_d2[:, :1]
    return out_ids, out_d2, counts


def _validate_query_args(pts, ids, q, k):
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise ShapeError(f"points must be (N, 3), got {pts.shape}")
    if ids.shape != (pts.shape[0],):
        raise ShapeError(f"ids shape {ids.shape} != ({pts.shape[0]},)")
    if q.ndim != 2 or q.shape[1] != 3:
        raise ShapeError(f"queries must be (B, 3), got {q.shape}")
    if k < 1:
        raise ConfigError(f"k must be >= 1, got {k}")
    if pts.shape[0] == 0:
        raise ShapeError("query against zero points")


def grid_query(points, ids, grid, queries, k: int):
    """Exact k-NN through the active backend (grid kernel or numpy)."""
    if ACTIVE_BACKEND == "compiled":
        pts = np.ascontiguousarray(points, dtype=np.float64)
        ids64 = np.ascontiguousarray(ids, dtype=np.int64)
        q = np.ascontiguousarray(queries, dtype=np.float64)
        _validate_query_args(pts, ids64, q, k)
        mins, cell, dims, cell_start, point_row = grid
        return _compiled.grid_query(
            pts, ids64, np.ascontiguousarray(mins), float(cell),
            np.ascontiguousarray(dims), np.ascontiguousarray(cell_start),
            np.ascontiguousarray(point_row), q, int(k),
        )
    return brute_query(points, ids, queries, k)


def compiled_grid_query(points, ids, grid, queries, k: int):
    """Always use the compiled kernel (benchmark/testing helper)."""
    if _compiled is None:
        raise ConfigError("compiled kernel is not available in this install")
    pts = np.ascontiguousarray(points, dtype=np.float64)
    ids64 = np.ascontiguousarray(ids, dtype=np.int64)
    q = np.ascontiguousarray(queries, dtype=np.float64)
    _validate_query_args(pts, ids64, q, k)
    mins, cell, dims, cell_start, point_row = grid
    return _compiled.grid_query(
        pts, ids64, np.ascontiguousarray(mins), float(cell),
        np.ascontiguousarray(dims), np.ascontiguousarray(cell_start),
        np.ascontiguousarray(point_row), q, int(k),
    )
