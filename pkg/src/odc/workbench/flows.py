"""Synthetic ocean-like flow fields for the flow-deviation running cost.

All analytic presets are built from tape primitives so the cost can be
differentiated through the agent positions.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass

import numpy as np

from .. import autodiff as ad
from ..autodiff import Tensor

PRESETS = ("uniform", "single_gyre", "double_gyre")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.atleast_2d(np.asarray(x, dtype=np.float64)))


@dataclass(frozen=True)
class UniformFlow:
    velocity: tuple[float, float] = (1.0, 0.0)

    def __call__(self, x):
        x = _as_tensor(x)
        return ad.mul(x, 0.0) + np.asarray(self.velocity, dtype=np.float64)


@dataclass(frozen=True)
class SingleGyre:
    """Rigid rotation about ``center`` with angular speed ``omega``."""

    omega: float = 1.0
    center: tuple[float, float] = (0.0, 0.0)

    def __call__(self, x):
        x = _as_tensor(x)
        rel = x - np.asarray(self.center, dtype=np.float64)
        rot = np.array([[0.0, self.omega], [-self.omega, 0.0]])
        return ad.matmul(rel, rot)


@dataclass(frozen=True)
class DoubleGyre:
    """Steady double gyre from the stream function A sin(pi x / L) sin(pi y / L)."""

    amplitude: float = 0.1
    length: float = 1.0

    def __call__(self, x):
        x = _as_tensor(x)
        k = math.pi / self.length
        px = ad.take(x, [0], axis=1) * k
        py = ad.take(x, [1], axis=1) * k
        a = self.amplitude * k
        vx = -a * ad.sin(px) * ad.cos(py)
        vy = a * ad.cos(px) * ad.sin(py)
        e0 = np.array([[1.0, 0.0]])
        e1 = np.array([[0.0, 1.0]])
        return ad.matmul(vx, e0) + ad.matmul(vy, e1)


def _bilinear_forward(values, attrs):
    grid: GriddedFlow = attrs["grid"]
    return grid.evaluate(values[0])[0]


def _bilinear_backward(g, xs, out, attrs, need):
    grid: GriddedFlow = attrs["grid"]
    _, jac = grid.evaluate(xs[0].value)
    # jac[n, k, j] = d v_k / d x_j
    return [Tensor(np.einsum("nk,nkj->nj", g.value, jac))]


ad.register_op("bilinear_flow", _bilinear_forward, _bilinear_backward, first_order_only=True)


@dataclass(frozen=True, eq=False)
class GriddedFlow:
    """Velocity samples on a regular grid, bilinearly interpolated and
    clamped to the grid boundary."""

    xs: np.ndarray
    ys: np.ndarray
    vx: np.ndarray  # (len(ys), len(xs))
    vy: np.ndarray

    @classmethod
    def from_csv(cls, path) -> "GriddedFlow":
        """CSV with header ``x,y,vx,vy`` covering a full rectangular grid."""
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.reader(fh)
            header = [h.strip() for h in next(reader)]
            if header != ["x", "y", "vx", "vy"]:
                raise ValueError(f"{path}: expected header x,y,vx,vy, got {header}")
            rows = np.array([[float(v) for v in r] for r in reader if r])
        xs, ys = np.unique(rows[:, 0]), np.unique(rows[:, 1])
        if len(rows) != len(xs) * len(ys) or len(xs) < 2 or len(ys) < 2:
            raise ValueError(f"{path}: samples do not form a full grid")
        vx = np.full((len(ys), len(xs)), np.nan)
        vy = np.full((len(ys), len(xs)), np.nan)
        ix = np.searchsorted(xs, rows[:, 0])
        iy = np.searchsorted(ys, rows[:, 1])
        vx[iy, ix] = rows[:, 2]
        vy[iy, ix] = rows[:, 3]
        if np.isnan(vx).any():
            raise ValueError(f"{path}: duplicate or missing grid points")
        return cls(xs, ys, vx, vy)

    def evaluate(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Velocities (n, 2) and Jacobians (n, 2, 2) at points ``x``."""
        x = np.atleast_2d(x)
        px = np.clip(x[:, 0], self.xs[0], self.xs[-1])
        py = np.clip(x[:, 1], self.ys[0], self.ys[-1])
        i = np.clip(np.searchsorted(self.xs, px, side="right") - 1, 0, len(self.xs) - 2)
        j = np.clip(np.searchsorted(self.ys, py, side="right") - 1, 0, len(self.ys) - 2)
        dx = self.xs[i + 1] - self.xs[i]
        dy = self.ys[j + 1] - self.ys[j]
        s = (px - self.xs[i]) / dx
        t = (py - self.ys[j]) / dy
        inside_x = (x[:, 0] >= self.xs[0]) & (x[:, 0] <= self.xs[-1])
        inside_y = (x[:, 1] >= self.ys[0]) & (x[:, 1] <= self.ys[-1])
        vel = np.empty((len(x), 2))
        jac = np.zeros((len(x), 2, 2))
        for k, f in enumerate((self.vx, self.vy)):
            f00, f10 = f[j, i], f[j, i + 1]
            f01, f11 = f[j + 1, i], f[j + 1, i + 1]
            vel[:, k] = (1 - s) * (1 - t) * f00 + s * (1 - t) * f10 + (1 - s) * t * f01 + s * t * f11
            jac[:, k, 0] = ((1 - t) * (f10 - f00) + t * (f11 - f01)) / dx * inside_x
            jac[:, k, 1] = ((1 - s) * (f01 - f00) + s * (f11 - f10)) / dy * inside_y
        return vel, jac

    def __call__(self, x):
        x = _as_tensor(x)
        return ad.apply_op("bilinear_flow", x, grid=self)


def make_flow(spec: dict):
    """Build a flow field from a config mapping with key ``preset`` or ``file``."""
    spec = dict(spec)
    if "file" in spec:
        return GriddedFlow.from_csv(spec["file"])
    preset = spec.pop("preset", None)
    if preset == "uniform":
        return UniformFlow(tuple(spec.get("velocity", (1.0, 0.0))))
    if preset == "single_gyre":
        return SingleGyre(float(spec.get("omega", 1.0)), tuple(spec.get("center", (0.0, 0.0))))
    if preset == "double_gyre":
        return DoubleGyre(float(spec.get("amplitude", 0.1)), float(spec.get("length", 1.0)))
    raise ValueError(f"unknown flow preset {preset!r}; expected one of {PRESETS} or a file")


def synthetic_flow_field(preset: str, x, **params) -> np.ndarray:
    """Velocity of a named preset at point(s) ``x``."""
    field = make_flow({"preset": preset, **params})
    v = field(np.atleast_2d(np.asarray(x, dtype=np.float64))).value
    return v[0] if np.ndim(x) == 1 else v
