# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of ``_kernels_py``; same signatures, same results."""
import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()


def linear_sum_assignment(cost):
    arr = np.asarray(cost, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("cost contains non-finite entries")
    cdef Py_ssize_t n = arr.shape[0], m = arr.shape[1]
    if n == 0 or m == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    flipped = n > m
    if flipped:
        arr = arr.T
        n, m = m, n
    cdef double[:, ::1] c = np.ascontiguousarray(arr)
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef long[::1] p = np.zeros(m + 1, dtype=np.int_)
    cdef long[::1] way = np.zeros(m + 1, dtype=np.int_)
    cdef char[::1] used = np.zeros(m + 1, dtype=np.int8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = []
    for j in range(1, m + 1):
        if p[j]:
            pairs.append((p[j] - 1, j - 1))
    pairs.sort()
    rows = np.array([r for r, _ in pairs], dtype=np.int64)
    cols = np.array([q for _, q in pairs], dtype=np.int64)
    if flipped:
        order = np.argsort(cols, kind="stable")
        rows, cols = cols[order], rows[order]
    return rows, cols


def rle_encode(flat):
    cdef cnp.uint8_t[::1] x = np.ascontiguousarray(flat, dtype=bool).view(np.uint8).ravel()
    cdef Py_ssize_t i, n = x.shape[0]
    cdef long run = 0
    cdef int current = 0
    counts = []
    for i in range(n):
        if x[i] == current:
            run += 1
        else:
            counts.append(run)
            current = 1 - current
            run = 1
    counts.append(run)
    return counts


def rle_decode(counts, Py_ssize_t n):
    out = np.zeros(n, dtype=bool)
    cdef cnp.uint8_t[::1] o = out.view(np.uint8)
    cdef Py_ssize_t pos = 0, k, c
    cdef bint val = 0
    for item in counts:
        c = int(item)
        if c < 0 or pos + c > n:
            raise ValueError(f"run lengths overflow mask of {n} cells")
        if val:
            for k in range(pos, pos + c):
                o[k] = 1
        pos += c
        val = not val
    if pos != n:
        raise ValueError(f"run lengths cover {pos} cells, expected {n}")
    return out


def label_contingency(a, b, Py_ssize_t na, Py_ssize_t nb):
    cdef long[::1] x = np.ascontiguousarray(a, dtype=np.int_).ravel()
    cdef long[::1] y = np.ascontiguousarray(b, dtype=np.int_).ravel()
    out = np.zeros((na, nb), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] o = out
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        if x[i] >= 0 and y[i] >= 0:
            o[x[i], y[i]] += 1
    return out
