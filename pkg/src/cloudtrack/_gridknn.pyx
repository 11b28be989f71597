# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Uniform-grid exact k-nearest-neighbour query kernel.

Mirrors ``kernels.brute_query`` bit for bit: squared distances accumulate the
x, y, z terms in that order, ties break toward the smaller payload id, and
results come back ascending by ``(d2, id)``.  Each query expands Chebyshev
rings of grid cells outward; a ring at index ``r`` can only contain points at
distance >= ``(r - 1) * cell`` from the query, so the walk stops as soon as
the retained worst candidate beats that bound (shrunk by a relative epsilon
to stay conservative under floating-point cell assignment).
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor
from libc.stdlib cimport free, malloc

cnp.import_array()


cdef inline bint _worse(double d2_a, long long id_a, double d2_b, long long id_b) nogil:
    """True when candidate a ranks after candidate b."""
    if d2_a != d2_b:
        return d2_a > d2_b
    return id_a > id_b


cdef inline void _sift_down(double* hd, long long* hid, Py_ssize_t start, Py_ssize_t size) nogil:
    cdef Py_ssize_t root = start, child
    cdef double dv = hd[root]
    cdef long long iv = hid[root]
    while True:
        child = 2 * root + 1
        if child >= size:
            break
        if child + 1 < size and _worse(hd[child + 1], hid[child + 1], hd[child], hid[child]):
            child += 1
        if _worse(hd[child], hid[child], dv, iv):
            hd[root] = hd[child]
            hid[root] = hid[child]
            root = child
        else:
            break
    hd[root] = dv
    hid[root] = iv


cdef inline void _sift_up(double* hd, long long* hid, Py_ssize_t pos) nogil:
    cdef Py_ssize_t parent
    cdef double dv = hd[pos]
    cdef long long iv = hid[pos]
    while pos > 0:
        parent = (pos - 1) // 2
        if _worse(dv, iv, hd[parent], hid[parent]):
            hd[pos] = hd[parent]
            hid[pos] = hid[parent]
            pos = parent
        else:
            break
    hd[pos] = dv
    hid[pos] = iv


cdef inline Py_ssize_t _scan_cell(
    const double[:, ::1] points,
    const long long[::1] ids,
    const long long[::1] cell_start,
    const long long[::1] point_row,
    Py_ssize_t flat,
    double qx, double qy, double qz,
    double* hd, long long* hid,
    Py_ssize_t count, Py_ssize_t k,
) nogil:
    cdef Py_ssize_t idx, row
    cdef double dx, dy, dz, d2
    cdef long long pid
    for idx in range(cell_start[flat], cell_start[flat + 1]):
        row = point_row[idx]
        dx = points[row, 0] - qx
        d2 = dx * dx
        dy = points[row, 1] - qy
        d2 = d2 + dy * dy
        dz = points[row, 2] - qz
        d2 = d2 + dz * dz
        pid = ids[row]
        if count < k:
            hd[count] = d2
            hid[count] = pid
            _sift_up(hd, hid, count)
            count += 1
        elif _worse(hd[0], hid[0], d2, pid):
            hd[0] = d2
            hid[0] = pid
            _sift_down(hd, hid, 0, k)
    return count


def grid_query(
    const double[:, ::1] points,
    const long long[::1] ids,
    const double[::1] mins,
    double cell,
    const long long[::1] dims,
    const long long[::1] cell_start,
    const long long[::1] point_row,
    const double[:, ::1] queries,
    Py_ssize_t k,
):
    """Batched exact k-NN over a prebuilt uniform grid.

    Returns ``(ids (B,k) int64, d2 (B,k) float64, counts (B,) int64)``; rows
    with fewer than ``k`` points repeat the nearest entry in the padding tail.
    """
    cdef Py_ssize_t nq = queries.shape[0]
    cdef Py_ssize_t n = points.shape[0]
    cdef Py_ssize_t kk = k if k < n else n

    out_ids = np.empty((nq, k), dtype=np.int64)
    out_d2 = np.empty((nq, k), dtype=np.float64)
    out_counts = np.empty(nq, dtype=np.int64)
    cdef long long[:, ::1] v_ids = out_ids
    cdef double[:, ::1] v_d2 = out_d2
    cdef long long[::1] v_counts = out_counts

    cdef double* hd = <double*> malloc(k * sizeof(double))
    cdef long long* hid = <long long*> malloc(k * sizeof(long long))
    if hd == NULL or hid == NULL:
        if hd != NULL:
            free(hd)
        if hid != NULL:
            free(hid)
        raise MemoryError()

    cdef Py_ssize_t b, count, r, rmax, m, i
    cdef Py_ssize_t nx = dims[0], ny = dims[1], nz = dims[2]
    cdef Py_ssize_t cx, cy, cz, xx, yy, zz, side
    cdef Py_ssize_t ylo, yhi, zlo, zhi, xlo_i, xhi_i, ylo_i, yhi_i
    cdef double qx, qy, qz, bound, tmp_d
    cdef long long tmp_i
    cdef Py_ssize_t axmax

    with nogil:
        for b in range(nq):
            qx = queries[b, 0]
            qy = queries[b, 1]
            qz = queries[b, 2]

            cx = <Py_ssize_t> floor((qx - mins[0]) / cell)
            cy = <Py_ssize_t> floor((qy - mins[1]) / cell)
            cz = <Py_ssize_t> floor((qz - mins[2]) / cell)
            if cx < 0:
                cx = 0
            elif cx > nx - 1:
                cx = nx - 1
            if cy < 0:
                cy = 0
            elif cy > ny - 1:
                cy = ny - 1
            if cz < 0:
                cz = 0
            elif cz > nz - 1:
                cz = nz - 1

            rmax = cx if cx > nx - 1 - cx else nx - 1 - cx
            axmax = cy if cy > ny - 1 - cy else ny - 1 - cy
            if axmax > rmax:
                rmax = axmax
            axmax = cz if cz > nz - 1 - cz else nz - 1 - cz
            if axmax > rmax:
                rmax = axmax

            count = 0
            for r in range(rmax + 1):
                if count == kk and r >= 2:
                    # points in ring >= r sit at least (r - 1) * cell away
                    bound = (r - 1) * cell * 0.999999999999
                    if hd[0] < bound * bound:
                        break
                if r == 0:
                    count = _scan_cell(points, ids, cell_start, point_row,
                                       (cx * ny + cy) * nz + cz,
                                       qx, qy, qz, hd, hid, count, kk)
                    continue
                ylo = cy - r if cy - r > 0 else 0
                yhi = cy + r if cy + r < ny - 1 else ny - 1
                zlo = cz - r if cz - r > 0 else 0
                zhi = cz + r if cz + r < nz - 1 else nz - 1
                xlo_i = cx - r + 1 if cx - r + 1 > 0 else 0
                xhi_i = cx + r - 1 if cx + r - 1 < nx - 1 else nx - 1
                ylo_i = cy - r + 1 if cy - r + 1 > 0 else 0
                yhi_i = cy + r - 1 if cy + r - 1 < ny - 1 else ny - 1

                for side in range(2):
                    xx = cx - r if side == 0 else cx + r
                    if 0 <= xx < nx:
                        for yy in range(ylo, yhi + 1):
                            for zz in range(zlo, zhi + 1):
                                count = _scan_cell(points, ids, cell_start, point_row,
                                                   (xx * ny + yy) * nz + zz,
                                                   qx, qy, qz, hd, hid, count, kk)
                for side in range(2):
                    yy = cy - r if side == 0 else cy + r
                    if 0 <= yy < ny:
                        for xx in range(xlo_i, xhi_i + 1):
                            for zz in range(zlo, zhi + 1):
                                count = _scan_cell(points, ids, cell_start, point_row,
                                                   (xx * ny + yy) * nz + zz,
                                                   qx, qy, qz, hd, hid, count, kk)
                for side in range(2):
                    zz = cz - r if side == 0 else cz + r
                    if 0 <= zz < nz:
                        for xx in range(xlo_i, xhi_i + 1):
                            for yy in range(ylo_i, yhi_i + 1):
                                count = _scan_cell(points, ids, cell_start, point_row,
                                                   (xx * ny + yy) * nz + zz,
                                                   qx, qy, qz, hd, hid, count, kk)

            # heap-sort ascending by (d2, id)
            m = count
            while m > 1:
                m -= 1
                tmp_d = hd[0]
                hd[0] = hd[m]
                hd[m] = tmp_d
                tmp_i = hid[0]
                hid[0] = hid[m]
                hid[m] = tmp_i
                _sift_down(hd, hid, 0, m)

            for i in range(count):
                v_ids[b, i] = hid[i]
                v_d2[b, i] = hd[i]
            for i in range(count, k):
                v_ids[b, i] = hid[0]
                v_d2[b, i] = hd[0]
            v_counts[b] = count

    free(hd)
    free(hid)
    return out_ids, out_d2, out_counts
