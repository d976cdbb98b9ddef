"""Pure-Python versions of the compiled kernels in ``_kernels.pyx``.

Both modules expose the same three functions with identical results; the
selector in :mod:`findkit.kernels` picks one at import.
"""
import math

import numpy as np


def linear_sum_assignment(cost):
    """Minimum-cost injective assignment for a rectangular cost matrix.

    Returns ``(rows, cols)`` int arrays of length ``min(n, m)`` sorted by row.
    Shortest augmenting path with row/column potentials, O(n^2 m).
    """
    a = np.asarray(cost, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("cost contains non-finite entries")
    n, m = a.shape
    if n == 0 or m == 0:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    flipped = n > m
    if flipped:
        a = a.T
        n, m = m, n
    c = a.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = c[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
    pairs = sorted((p[j] - 1, j - 1) for j in range(1, m + 1) if p[j])
    rows = np.array([r for r, _ in pairs], dtype=np.int64)
    cols = np.array([q for _, q in pairs], dtype=np.int64)
    if flipped:
        order = np.argsort(cols, kind="stable")
        rows, cols = cols[order], rows[order]
    return rows, cols


def rle_encode(flat):
    """Run lengths of a flat 0/1 array, alternating, starting with a zero run."""
    counts = []
    current = 0
    run = 0
    for x in np.asarray(flat, dtype=bool).tolist():
        if int(x) == current:
            run += 1
        else:
            counts.append(run)
            current = 1 - current
            run = 1
    counts.append(run)
    return counts


def rle_decode(counts, n):
    out = np.zeros(n, dtype=bool)
    pos = 0
    val = False
    for c in counts:
        c = int(c)
        if c < 0 or pos + c > n:
            raise ValueError(f"run lengths overflow mask of {n} cells")
        if val:
            out[pos:pos + c] = True
        pos += c
        val = not val
    if pos != n:
        raise ValueError(f"run lengths cover {pos} cells, expected {n}")
    return out


def label_contingency(a, b, na, nb):
    """Count matrix ``[na x nb]`` of co-occurring labels; negative labels are skipped."""
    out = np.zeros((na, nb), dtype=np.int64)
    for x, y in zip(np.asarray(a).ravel().tolist(), np.asarray(b).ravel().tolist()):
        if x >= 0 and y >= 0:
            out[x, y] += 1
    return out
