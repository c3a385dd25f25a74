"""Numpy implementations of the hot kernels.

Same signatures and results as the compiled ``_kernels`` extension; used when
the extension is not built or ``ODC_PURE_PYTHON=1`` is set.
"""

import numpy as np

INVERSE_POWER = 0
LOG = 1

_CHUNK = 512


def _sqdist(a, b):
    d = a[:, None, :] - b[None, :, :]
    return np.einsum("ijk,ijk->ij", d, d)


def nearest_neighbors(a, b):
    """For each row of ``a`` the index of and squared distance to its
    nearest row of ``b``."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    idx = np.empty(len(a), dtype=np.int64)
    dist = np.empty(len(a))
    for s in range(0, len(a), _CHUNK):
        d2 = _sqdist(a[s : s + _CHUNK], b)
        k = np.argmin(d2, axis=1)
        idx[s : s + _CHUNK] = k
        dist[s : s + _CHUNK] = d2[np.arange(len(k)), k]
    return idx, dist


def min_pairwise_distance(x):
    """(min distance, i, j) over distinct rows i < j."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = len(x)
    if n < 2:
        return np.inf, -1, -1
    best, bi, bj = np.inf, -1, -1
    for s in range(0, n, _CHUNK):
        d2 = _sqdist(x[s : s + _CHUNK], x)
        rows = np.arange(d2.shape[0])
        d2[rows[:, None] + s >= np.arange(n)[None, :]] = np.inf
        k = np.argmin(d2)
        r, c = divmod(int(k), n)
        if d2[r, c] < best:
            best, bi, bj = d2[r, c], r + s, c
    return float(np.sqrt(best)), int(bi), int(bj)


def _pair_terms(x, kind, c, alpha):
    diff = x[:, None, :] - x[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    np.fill_diagonal(d2, 1.0)
    if kind == INVERSE_POWER:
        v = c * d2 ** (-0.5 * alpha)
        # dV/dx_i = -alpha c r^(-alpha-2) (x_i - x_j)
        coef = -alpha * c * d2 ** (-0.5 * alpha - 1.0)
    else:
        v = -0.5 * c * np.log(d2)
        coef = -c / d2
    np.fill_diagonal(v, 0.0)
    np.fill_diagonal(coef, 0.0)
    return diff, v, coef


def pair_potential(x, kind, c, alpha):
    """Per-agent mean interaction (1/(N-1)) sum_{j != i} V(x_i, x_j)."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = len(x)
    _, v, _ = _pair_terms(x, kind, c, alpha)
    return v.sum(axis=1) / (n - 1)


def pair_potential_vjp(x, g, kind, c, alpha):
    """Cotangent of :func:`pair_potential` w.r.t. x given output cotangent g."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    g = np.ascontiguousarray(g, dtype=np.float64)
    n = len(x)
    diff, _, coef = _pair_terms(x, kind, c, alpha)
    w = (g[:, None] + g[None, :]) * coef
    return np.einsum("ij,ijk->ik", w, diff) / (n - 1)


def linear_sum_assignment(cost):
    """Minimum-cost perfect matching of a square matrix.

    Shortest augmenting path form of the Hungarian method with row/column
    potentials; returns the column assigned to each row.
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n != m:
        raise ValueError("cost matrix must be square")
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[~used] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    assignment = np.empty(n, dtype=np.int64)
    assignment[p[1:] - 1] = np.arange(n)
    return assignment
