# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled nearest-surface kernel."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def directed_min_sqdist(const double[:, ::1] src, const double[:, ::1] dst):
    """Squared distance from each ``src`` point to its nearest ``dst`` point."""
    cdef Py_ssize_t n = src.shape[0], m = dst.shape[0], i, j
    cdef double best, dz, dy, dx, d
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] res = out
    if m == 0:
        out.fill(np.inf)
        return out
    with nogil:
        for i in range(n):
            best = 1.0 / 0.0
            for j in range(m):
                dz = src[i, 0] - dst[j, 0]
                dy = src[i, 1] - dst[j, 1]
                dx = src[i, 2] - dst[j, 2]
                d = dz * dz + dy * dy
                d = d + dx * dx
                if d < best:
                    best = d
            res[i] = best
    return out
