"""Running costs, the pairwise interaction penalty and their accumulation along trajectories."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Tensor
from .dynamics import TrajectoryBatch

MIN_DISTANCE = 1e-9


class CollisionError(ValueError):
    """Two agents coincide, so the interaction kernel is singular."""


@dataclass(frozen=True)
class InteractionSpec:
    kernel: str = "inverse_power"
    c: float = 1.0
    alpha: float = 2.0
    weight: float = 1.0
    subsample: int = 256

    def __post_init__(self):
        if self.kernel not in ("inverse_power", "log"):
            raise ValueError(f"unknown interaction kernel {self.kernel!r}")
        if self.c <= 0 or self.alpha <= 0:
            raise ValueError("kernel constants must be positive")
        if self.weight < 0:
            raise ValueError("interaction weight must be non-negative")

    @property
    def kernel_id(self) -> int:
        return kernels.INVERSE_POWER if self.kernel == "inverse_power" else kernels.LOG

    def pair_value(self, r: float) -> float:
        """V at distance r; the log kernel is repulsive, -c ln r."""
        if self.kernel == "inverse_power":
            return self.c * r ** (-self.alpha)
        return -self.c * np.log(r)


@dataclass(frozen=True)
class CostSpec:
    base: str = "quadratic_energy"
    flow: Callable | None = None
    interaction: InteractionSpec | None = None

    def __post_init__(self):
        if self.base not in ("quadratic_energy", "flow_deviation"):
            raise ValueError(f"unknown base cost {self.base!r}")
        if self.base == "flow_deviation" and self.flow is None:
            raise ValueError("flow_deviation needs a flow field")


def quadratic_energy(u):
    """1/2 |u|^2, row-wise for a batch."""
    if isinstance(u, Tensor):
        return 0.5 * ad.sqnorm(u, axis=-1)
    u = np.asarray(u, dtype=np.float64)
    return 0.5 * np.sum(u * u, axis=-1)


def flow_deviation(u, v):
    """1/2 |u - v|^2, row-wise for a batch."""
    if isinstance(u, Tensor) or isinstance(v, Tensor):
        return quadratic_energy(ad.sub(u, v))
    return quadratic_energy(np.asarray(u, dtype=np.float64) - np.asarray(v, dtype=np.float64))


def interaction_penalty(x, others, spec: InteractionSpec) -> float:
    """Mean of V(x, y) over the other agents ``others`` (x itself excluded)."""
    x = np.asarray(x, dtype=np.float64)
    others = np.atleast_2d(np.asarray(others, dtype=np.float64))
    r = np.linalg.norm(others - x, axis=1)
    bad = np.flatnonzero(r < MIN_DISTANCE)
    if bad.size:
        raise CollisionError(f"agent coincides with other agent {bad[0]} (distance {r[bad[0]]:.3g})")
    if spec.kernel == "inverse_power":
        v = spec.c * r ** (-spec.alpha)
    else:
        v = -spec.c * np.log(r)
    return float(v.mean())


def _pair_forward(values, attrs):
    return kernels.pair_potential(values[0], attrs["kind"], attrs["c"], attrs["alpha"])


def _pair_backward(g, xs, out, attrs, need):
    grad = kernels.pair_potential_vjp(xs[0].value, g.value, attrs["kind"], attrs["c"], attrs["alpha"])
    return [Tensor(grad)]


ad.register_op("pair_potential", _pair_forward, _pair_backward, first_order_only=True)


def check_collisions(x: np.ndarray) -> None:
    dmin, i, j = kernels.min_pairwise_distance(x)
    if dmin < MIN_DISTANCE:
        raise CollisionError(f"agents {i} and {j} coincide (distance {dmin:.3g})")


def interaction_field(x: Tensor, spec: InteractionSpec) -> Tensor:
    """Per-agent interaction (1/(N-1)) sum_{j != i} V(x_i, x_j) as a tape op."""
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if x.shape[0] < 2:
        return ad.mul(x.sum(axis=1), 0.0)
    check_collisions(x.value)
    return ad.apply_op("pair_potential", x, kind=spec.kernel_id, c=spec.c, alpha=spec.alpha)


def base_cost(spec: CostSpec, x: Tensor, u: Tensor) -> Tensor:
    if spec.base == "quadratic_energy":
        return quadratic_energy(u)
    return flow_deviation(u, spec.flow(x))


def accumulate_running_cost(
    traj: TrajectoryBatch,
    spec: CostSpec,
    control=None,
    h: float | None = None,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """(1/N) sum_i sum_{k<K} h [c(x_k, u(x_k)) + weight * interaction_k].

    Left Riemann sum over the simulation grid. Controls stored on the
    trajectory are reused; otherwise ``control`` is re-evaluated. When the
    batch exceeds ``interaction.subsample`` the interaction is averaged over a
    uniform agent subsample drawn from ``rng``.
    """
    if h is None:
        h = float(traj.times[1] - traj.times[0])
    k_steps = len(traj) - 1
    controls = traj.controls if len(traj.controls) == k_steps else None
    if controls is None:
        if control is None:
            raise ValueError("trajectory carries no controls and none was given")
        controls = [control(traj.states[k]) for k in range(k_steps)]
    inter = spec.interaction
    total = None
    for k in range(k_steps):
        x, u = traj.states[k], controls[k]
        term = ad.mean(base_cost(spec, x, u))
        if inter is not None and inter.weight > 0:
            xs = x
            n = x.shape[0]
            if n > inter.subsample:
                rng = rng if rng is not None else np.random.default_rng(k)
                xs = ad.take(x, np.sort(rng.choice(n, inter.subsample, replace=False)))
            term = term + inter.weight * ad.mean(interaction_field(xs, inter))
        total = term if total is None else total + term
    if total is None:
        return Tensor(np.array(0.0))
    return h * total
