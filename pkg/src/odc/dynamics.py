"""Euler-Maruyama simulation of the controlled particle SDE dx = u(x) dt + sigma(x) dW."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .autodiff import Tensor

NOISE_STREAM = 0x5DE
Control = Callable[[Tensor], Tensor]


@dataclass(frozen=True)
class DiffusionSpec:
    """Diffusion coefficient: ``zero``, ``isotropic`` constant sigma, or a
    ``state`` dependent field returning per-coordinate sigma(x)."""

    kind: str = "zero"
    sigma: float = 0.0
    field: Callable | None = None

    def __post_init__(self):
        if self.kind not in ("zero", "isotropic", "state"):
            raise ValueError(f"unknown diffusion kind {self.kind!r}")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.kind == "state" and self.field is None:
            raise ValueError("state-dependent diffusion needs a field")

    @classmethod
    def isotropic(cls, sigma: float) -> "DiffusionSpec":
        return cls("isotropic", float(sigma))

    @property
    def is_zero(self) -> bool:
        return self.kind == "zero" or (self.kind == "isotropic" and self.sigma == 0.0)


@dataclass
class ParticleBatch:
    states: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=np.float64))
        if len(self.states) < 1:
            raise ValueError("need at least one particle")
        if not np.all(np.isfinite(self.states)):
            raise ValueError("particle states must be finite")


@dataclass
class TrajectoryBatch:
    states: list[Tensor]
    times: np.ndarray
    noise: np.ndarray
    controls: list[Tensor] = field(default_factory=list)
    agent_ids: np.ndarray | None = None

    def __len__(self):
        return len(self.states)

    @property
    def terminal(self) -> Tensor:
        return self.states[-1]

    def positions(self) -> np.ndarray:
        """(steps+1, N, d) array of states."""
        return np.stack([s.value for s in self.states])

    def batch(self, k: int) -> ParticleBatch:
        return ParticleBatch(self.states[k].value, float(self.times[k]))


def num_steps(h: float, T: float) -> int:
    if not (0 < h <= T):
        raise ValueError("require 0 < h <= T")
    # guard against T/h landing just below an integer in floating point
    return int(math.floor(T / h + 1e-9))


def noise_block(seed: int, iteration: int, step: int, n_total: int, d: int) -> np.ndarray:
    """Standard normals for every agent of the population at one step.

    The stream is keyed on (seed, iteration, step), and row i always belongs
    to agent i, so a given (agent, step, coordinate) draw does not depend on
    which agents are simulated together.
    """
    ss = np.random.SeedSequence([int(seed), NOISE_STREAM, int(iteration), int(step)])
    return np.random.Generator(np.random.Philox(ss)).standard_normal((n_total, d))


def em_step(
    x: Tensor,
    control: Control,
    diffusion: DiffusionSpec,
    h: float,
    noise: np.ndarray | None = None,
) -> tuple[Tensor, Tensor]:
    """One step x' = x + h u(x) + sqrt(h) sigma(x) delta; returns (x', u(x))."""
    if h <= 0:
        raise ValueError("h must be positive")
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    u = control(x)
    x_new = x + h * u
    if not diffusion.is_zero:
        if noise is None:
            raise ValueError("noise required for non-zero diffusion")
        if diffusion.kind == "isotropic":
            x_new = x_new + (math.sqrt(h) * diffusion.sigma) * noise
        else:
            x_new = x_new + diffusion.field(x) * (math.sqrt(h) * noise)
    return x_new, u


def rollout(
    x0,
    control: Control,
    diffusion: DiffusionSpec,
    h: float,
    T: float,
    seed: int = 0,
    iteration: int = 0,
    agent_ids: np.ndarray | None = None,
    n_total: int | None = None,
) -> TrajectoryBatch:
    """Simulate floor(T/h) Euler-Maruyama steps from ``x0``.

    ``x0`` may be a tape tensor, in which case the whole trajectory is
    recorded on that tape. ``agent_ids`` selects the rows of the population
    noise stream (default: 0..N-1).
    """
    if isinstance(x0, ParticleBatch):
        x0 = x0.states
    if not isinstance(x0, Tensor):
        x0 = Tensor(np.atleast_2d(np.asarray(x0, dtype=np.float64)))
    n, d = x0.shape
    k_steps = num_steps(h, T)
    if agent_ids is None:
        agent_ids = np.arange(n)
    n_total = int(n_total if n_total is not None else agent_ids.max() + 1)
    noise = np.zeros((k_steps, n, d))
    states, controls = [x0], []
    x = x0
    for k in range(k_steps):
        if not diffusion.is_zero:
            noise[k] = noise_block(seed, iteration, k, n_total, d)[agent_ids]
        x, u = em_step(x, control, diffusion, h, noise[k])
        states.append(x)
        controls.append(u)
    times = np.arange(k_steps + 1) * h
    return TrajectoryBatch(states, times, noise, controls, np.asarray(agent_ids))
