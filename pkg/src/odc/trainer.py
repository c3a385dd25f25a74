"""Saddle-point training of the control (descent) against the dual critic (ascent).

Each outer iteration regenerates particle trajectories under the current
control, runs a few ascent steps on the critic with the terminal states held
fixed, then takes one descent step on the control parameters with the critic
held fixed (the maximiser's own dependence on the control never enters the
gradient).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .costs import CostSpec, accumulate_running_cost
from .dynamics import DiffusionSpec, TrajectoryBatch, rollout
from .matching import chamfer, dual_gap
from .network import (
    MLPSpec,
    NetworkParams,
    control_from_potential,
    converge_spectral_state,
    direct_control,
    mlp_forward,
    spectral_normalize,
    xavier_initialize,
)

BATCH_STREAM = 0xBA7
HARD_SPECTRAL_ITERS = 50
MATCHERS = ("wasserstein_dual", "chamfer")


class TrainingDiverged(FloatingPointError):
    def __init__(self, iteration: int, cause: Exception):
        super().__init__(f"non-finite value at outer iteration {iteration}: {cause}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    gamma: float = 1.0
    outer_iters: int = 10_000
    inner_iters: int = 6
    learning_rate: float = 1e-4
    inner_learning_rate: float | None = None
    optimizer: str = "adam"
    inner_optimizer: str | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 1500
    target_batch_size: int | None = None
    param_radius: float = math.inf
    matcher: str = "wasserstein_dual"
    spectral_iters: int = 1
    early_stop_tol: float | None = None
    early_stop_patience: int = 50

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be non-negative")
        if self.outer_iters < 1 or self.batch_size < 1:
            raise ValueError("outer_iters and batch_size must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        for opt in (self.optimizer, self.inner_optimizer or self.optimizer):
            if opt not in ("sgd", "adam"):
                raise ValueError(f"unknown optimizer {opt!r}")
        if self.matcher not in MATCHERS:
            raise ValueError(f"unknown matcher {self.matcher!r}")
        if self.matcher == "wasserstein_dual" and self.inner_iters < 1:
            raise ValueError("inner_iters must be >= 1 for the Wasserstein matcher")
        if self.param_radius <= 0:
            raise ValueError("param_radius must be positive")

    @property
    def inner_lr(self) -> float:
        return self.learning_rate if self.inner_learning_rate is None else self.inner_learning_rate


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays], 0)

    def copy(self) -> "AdamState":
        return AdamState([a.copy() for a in self.m], [a.copy() for a in self.v], self.t)


def adam_update(state: AdamState, grads, lr: float, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam. Returns (new state, list of steps to add)."""
    t = state.t + 1
    m = [beta1 * mi + (1 - beta1) * g for mi, g in zip(state.m, grads)]
    v = [beta2 * vi + (1 - beta2) * g * g for vi, g in zip(state.v, grads)]
    c1 = 1 - beta1**t
    c2 = 1 - beta2**t
    steps = [-lr * (mi / c1) / (np.sqrt(vi / c2) + eps) for mi, vi in zip(m, v)]
    return AdamState(m, v, t), steps


class Optimizer:
    """Descent on a list of arrays with SGD or Adam; state is copied on write."""

    def __init__(self, kind: str, lr: float, beta1=0.9, beta2=0.999, eps=1e-8, state=None):
        self.kind, self.lr = kind, lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.state: AdamState | None = state

    @classmethod
    def from_config(cls, cfg: TrainConfig, lr: float, kind: str | None = None) -> "Optimizer":
        return cls(kind or cfg.optimizer, lr, cfg.beta1, cfg.beta2, cfg.eps)

    def step(self, arrays, grads) -> list[np.ndarray]:
        if self.kind == "sgd":
            return [a - self.lr * g for a, g in zip(arrays, grads)]
        if self.state is None:
            self.state = AdamState.zeros_like(arrays)
        self.state, steps = adam_update(self.state, grads, self.lr, self.beta1, self.beta2, self.eps)
        return [a + s for a, s in zip(arrays, steps)]


def project_ball(theta: np.ndarray, radius: float) -> np.ndarray:
    """Radial projection onto {|theta| <= radius}."""
    if math.isinf(radius):
        return theta
    norm = float(np.linalg.norm(theta))
    if norm <= radius:
        return theta
    return theta * (radius / norm)


def gradient_mapping(theta: np.ndarray, grad: np.ndarray, tau: float, radius: float) -> np.ndarray:
    """(theta - P(theta - tau grad)) / tau; exactly ``grad`` when no projection
    is active."""
    if tau <= 0:
        raise ValueError("tau must be positive")
    trial = theta - tau * grad
    if math.isinf(radius) or np.linalg.norm(trial) <= radius:
        return np.array(grad, copy=True)
    return (theta - project_ball(trial, radius)) / tau


def outer_control_step(theta: NetworkParams, grads, optimizer: Optimizer, radius=math.inf) -> NetworkParams:
    """Descent step on the control parameters followed by projection."""
    new = theta.with_arrays(optimizer.step(theta.arrays(), grads))
    if math.isinf(radius):
        return new
    return new.from_flat(project_ball(new.flat(), radius))


# ---------------------------------------------------------------------------
# objective pieces


def make_control(params, spec: MLPSpec, kind: str = "gradient") -> Callable[[Tensor], Tensor]:
    if kind == "gradient":
        return lambda x: control_from_potential(params, spec, x)
    if kind == "direct":
        return lambda x: direct_control(params, spec, x)
    raise ValueError(f"unknown control kind {kind!r}")


def critic(params, spec: MLPSpec) -> Callable[[Tensor], Tensor]:
    return lambda x: mlp_forward(params, spec, x)


def empirical_objective(
    traj: TrajectoryBatch,
    running_cost: Tensor,
    target,
    gamma: float,
    phi=None,
    matcher: str = "wasserstein_dual",
) -> tuple[Tensor, Tensor]:
    """Running cost + gamma * matching term; returns (objective, matching term)."""
    if matcher == "chamfer":
        match = chamfer(traj.terminal, target)
    else:
        match = dual_gap(phi, traj.terminal, target)
    return running_cost + gamma * match, match


def inner_dual_ascent(
    eta: NetworkParams,
    spec: MLPSpec,
    x_t: np.ndarray,
    z: np.ndarray,
    optimizer: Optimizer,
    steps: int,
    spectral_iters: int = 1,
) -> tuple[NetworkParams, list[float]]:
    """``steps`` ascent steps on E_x[phi] - E_z[phi] with the clouds frozen,
    re-normalizing after each step. Returns the critic and the gap before
    each step."""
    gaps = []
    for _ in range(steps):
        tape = Tape()
        variables = eta.on_tape(tape)
        gap = dual_gap(critic(variables, spec), tape.constant(x_t), tape.constant(z))
        grads = ad.reverse_gradient(gap, variables)
        gaps.append(gap.item())
        # ascent = descent on the negated gradient
        eta = eta.with_arrays(optimizer.step(eta.arrays(), [-g.value for g in grads]))
        eta = spectral_normalize(eta, spectral_iters)
    return eta, gaps


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainMetrics:
    iteration: list[int] = field(default_factory=list)
    objective: list[float] = field(default_factory=list)
    running_cost: list[float] = field(default_factory=list)
    match_value: list[float] = field(default_factory=list)
    grad_map_norm: list[float] = field(default_factory=list)
    wall_ms: list[float] = field(default_factory=list)
    inner_steps: int = 0
    inner_monotone: list[bool] = field(default_factory=list)

    COLUMNS = ("iter", "objective", "running_cost", "match_value", "grad_map_norm", "wall_ms")

    def __len__(self):
        return len(self.iteration)

    def append(self, it, objective, running, match, gmap, wall):
        self.iteration.append(it)
        self.objective.append(objective)
        self.running_cost.append(running)
        self.match_value.append(match)
        self.grad_map_norm.append(gmap)
        self.wall_ms.append(wall)

    def rows(self):
        return list(
            zip(
                self.iteration,
                self.objective,
                self.running_cost,
                self.match_value,
                self.grad_map_norm,
                self.wall_ms,
            )
        )

    def running_min_sq_gmap(self) -> np.ndarray:
        return np.minimum.accumulate(np.square(self.grad_map_norm))


@dataclass
class Problem:
    """Everything the loop needs, already sampled."""

    x0: np.ndarray
    target: np.ndarray
    cost: CostSpec
    diffusion: DiffusionSpec
    h: float
    T: float
    psi_spec: MLPSpec
    phi_spec: MLPSpec
    config: TrainConfig
    seed: int = 0
    control_kind: str = "gradient"


@dataclass
class TrainState:
    psi: NetworkParams
    phi: NetworkParams
    theta_opt: Optimizer
    eta_opt: Optimizer
    iteration: int = 0
    stall: int = 0


def init_state(problem: Problem) -> TrainState:
    cfg = problem.config
    psi = xavier_initialize(problem.psi_spec, [problem.seed, 1])
    phi = xavier_initialize(problem.phi_spec, [problem.seed, 2])
    phi = converge_spectral_state(phi, seed=[problem.seed, 3])
    phi = spectral_normalize(phi, HARD_SPECTRAL_ITERS)
    return TrainState(
        psi,
        phi,
        Optimizer.from_config(cfg, cfg.learning_rate),
        Optimizer.from_config(cfg, cfg.inner_lr, cfg.inner_optimizer),
    )


def _batch_rng(seed: int, iteration: int) -> np.random.Generator:
    ss = np.random.SeedSequence([int(seed), BATCH_STREAM, int(iteration)])
    return np.random.Generator(np.random.Philox(ss))


def _subsample(rng, n: int, k: int) -> np.ndarray:
    if k >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, k, replace=False))


def outer_iteration(problem: Problem, state: TrainState, metrics: TrainMetrics, timing=False) -> float:
    """One outer iteration in place; returns the squared gradient-mapping norm."""
    cfg = problem.config
    it = state.iteration
    t0 = time.perf_counter()
    rng = _batch_rng(problem.seed, it)
    ids = _subsample(rng, len(problem.x0), cfg.batch_size)
    zb = problem.target[_subsample(rng, len(problem.target), cfg.target_batch_size or cfg.batch_size)]

    tape = Tape()
    theta = state.psi.on_tape(tape)
    control = make_control(theta, problem.psi_spec, problem.control_kind)
    traj = rollout(
        tape.constant(problem.x0[ids]),
        control,
        problem.diffusion,
        problem.h,
        problem.T,
        seed=problem.seed,
        iteration=it,
        agent_ids=ids,
        n_total=len(problem.x0),
    )
    running = accumulate_running_cost(traj, problem.cost, h=problem.h, rng=rng)

    if cfg.matcher == "chamfer":
        objective, match = empirical_objective(traj, running, zb, cfg.gamma, matcher="chamfer")
        reported = objective.item()
    else:
        phi_fixed = critic(state.phi.on_tape(tape, trainable=False), problem.phi_spec)
        reported = empirical_objective(traj, running, zb, cfg.gamma, phi_fixed)[0].item()
        state.phi, gaps = inner_dual_ascent(
            state.phi,
            problem.phi_spec,
            traj.terminal.value,
            zb,
            state.eta_opt,
            cfg.inner_iters,
            cfg.spectral_iters,
        )
        metrics.inner_steps += cfg.inner_iters
        phi_fixed = critic(state.phi.on_tape(tape, trainable=False), problem.phi_spec)
        objective, match = empirical_objective(traj, running, zb, cfg.gamma, phi_fixed)
        gaps.append(match.item())
        metrics.inner_monotone.append(bool(np.all(np.diff(gaps) >= -1e-12)))

    grads = [g.value for g in ad.reverse_gradient(objective, theta)]
    flat_theta = state.psi.flat()
    flat_grad = np.concatenate([g.ravel() for g in grads])
    gmap = gradient_mapping(flat_theta, flat_grad, cfg.learning_rate, cfg.param_radius)
    gmap_sq = float(gmap @ gmap)
    state.psi = outer_control_step(state.psi, grads, state.theta_opt, cfg.param_radius)

    wall = (time.perf_counter() - t0) * 1e3 if timing else 0.0
    metrics.append(it, reported, running.item(), match.item(), math.sqrt(gmap_sq), wall)
    state.iteration += 1
    return gmap_sq


def odc_train(
    problem: Problem,
    state: TrainState | None = None,
    metrics: TrainMetrics | None = None,
    iterations: int | None = None,
    callback: Callable[[TrainState, TrainMetrics], None] | None = None,
    timing: bool = False,
) -> tuple[TrainState, TrainMetrics]:
    """Run outer iterations until ``config.outer_iters`` (or ``iterations``
    more) are done, or the optional early stop fires."""
    cfg = problem.config
    state = state if state is not None else init_state(problem)
    metrics = metrics if metrics is not None else TrainMetrics()
    stop_at = cfg.outer_iters if iterations is None else min(cfg.outer_iters, state.iteration + iterations)
    while state.iteration < stop_at:
        it = state.iteration
        try:
            gmap_sq = outer_iteration(problem, state, metrics, timing)
        except (ad.NonFiniteError, FloatingPointError) as exc:
            raise TrainingDiverged(it, exc) from exc
        if not all(math.isfinite(v) for v in (metrics.objective[-1], gmap_sq)):
            raise TrainingDiverged(it, FloatingPointError("objective is not finite"))
        if callback is not None:
            callback(state, metrics)
        if cfg.early_stop_tol is not None:
            state.stall = state.stall + 1 if gmap_sq < cfg.early_stop_tol else 0
            if state.stall >= cfg.early_stop_patience:
                break
    return state, metrics


def hard_normalized(phi: NetworkParams) -> NetworkParams:
    return spectral_normalize(phi, HARD_SPECTRAL_ITERS)


def simulate(
    psi: NetworkParams,
    psi_spec: MLPSpec,
    x0: np.ndarray,
    diffusion: DiffusionSpec,
    h: float,
    T: float,
    seed: int = 0,
    control_kind: str = "gradient",
    iteration: int = 0,
) -> TrajectoryBatch:
    """Rollout of a frozen control without recording parameter gradients."""
    control = make_control(psi, psi_spec, control_kind)
    return rollout(x0, control, diffusion, h, T, seed=seed, iteration=iteration)
