"""Discrepancies between terminal particles and target samples.

``dual_gap`` is the adversarial Wasserstein-1 estimate driven by a
1-Lipschitz critic, ``chamfer`` the closed-form point-cloud alternative, and
``emd_exact`` the exact transport LP used as an oracle for evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linprog
from scipy.sparse import coo_matrix, vstack
from scipy.spatial.distance import cdist

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor

EMD_SIZE_LIMIT = 10**6


@dataclass
class PointCloud:
    points: np.ndarray
    weights: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.atleast_2d(np.asarray(self.points, dtype=np.float64))
        if len(self.points) < 1:
            raise ValueError("point cloud must not be empty")
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (len(self.points),) or np.any(w < 0):
                raise ValueError("weights must be non-negative, one per point")
            if abs(w.sum() - 1.0) > 1e-9:
                raise ValueError(f"weights sum to {w.sum()}, expected 1")
            self.weights = w

    def __len__(self):
        return len(self.points)

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def is_uniform(self) -> bool:
        return self.weights is None or np.allclose(self.weights, 1.0 / len(self))

    def mass(self) -> np.ndarray:
        if self.weights is None:
            return np.full(len(self), 1.0 / len(self))
        return self.weights


def _points(x):
    if isinstance(x, PointCloud):
        return Tensor(x.points), x.weights
    if isinstance(x, Tensor):
        return x, None
    return Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64))), None


def _expect(phi_vals: Tensor, weights) -> Tensor:
    if weights is None:
        return ad.mean(phi_vals)
    return ad.tsum(ad.mul(ad.reshape(phi_vals, (-1,)), weights))


def dual_gap(phi: Callable[[Tensor], Tensor], x, z) -> Tensor:
    """E_x[phi] - E_z[phi] for a critic ``phi`` mapping (n, d) -> (n, 1)."""
    xt, xw = _points(x)
    zt, zw = _points(z)
    if zt.tape is None and xt.tape is not None:
        zt = xt.tape.constant(zt.value)
    return _expect(phi(xt), xw) - _expect(phi(zt), zw)


def chamfer(x, z) -> Tensor:
    """sum_i min_j |x_i - z_j|^2 + sum_j min_i |x_i - z_j|^2.

    Nearest-neighbour indices are found by the kernel and treated as fixed,
    which gives the exact gradient almost everywhere.
    """
    xt, _ = _points(x)
    zt, _ = _points(z)
    if xt.tape is not None and zt.tape is None:
        zt = xt.tape.constant(zt.value)
    nn_x, _ = kernels.nearest_neighbors(xt.value, zt.value)
    nn_z, _ = kernels.nearest_neighbors(zt.value, xt.value)
    forward = ad.sqnorm(xt - ad.take(zt, nn_x))
    backward = ad.sqnorm(ad.take(xt, nn_z) - zt)
    return forward + backward


def emd_exact(x, z, max_size: int = EMD_SIZE_LIMIT) -> float:
    """Exact discrete Wasserstein-1 distance with Euclidean ground cost.

    Equal-size uniform clouds are solved as an assignment problem, anything
    else as the balanced transport LP.
    """
    x = x if isinstance(x, PointCloud) else PointCloud(_raw(x))
    z = z if isinstance(z, PointCloud) else PointCloud(_raw(z))
    n, m = len(x), len(z)
    if n * m > max_size:
        raise ValueError(f"EMD problem of size {n}x{m} exceeds limit {max_size}")
    cost = cdist(x.points, z.points)
    if n == m and x.is_uniform and z.is_uniform:
        cols = kernels.linear_sum_assignment(cost)
        return float(cost[np.arange(n), cols].mean())
    return float(_transport_lp(cost, x.mass(), z.mass()))


def _raw(a):
    return a.value if isinstance(a, Tensor) else a


def _transport_lp(cost: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    n, m = cost.shape
    rows = np.repeat(np.arange(n), m)
    cols = np.arange(n * m)
    a_rows = coo_matrix((np.ones(n * m), (rows, cols)), shape=(n, n * m))
    a_cols = coo_matrix((np.ones(n * m), (np.tile(np.arange(m), n), cols)), shape=(m, n * m))
    res = linprog(
        cost.ravel(),
        A_eq=vstack([a_rows, a_cols]).tocsr(),
        b_eq=np.concatenate([a, b]),
        bounds=(0, None),
        method="highs",
    )
    if not res.success:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return res.fun
