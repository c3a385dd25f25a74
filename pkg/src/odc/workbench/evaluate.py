"""Held-out evaluation of a frozen control."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .. import kernels
from ..costs import accumulate_running_cost
from ..dynamics import TrajectoryBatch
from ..matching import EMD_SIZE_LIMIT, chamfer, emd_exact
from ..network import NetworkParams, xavier_initialize
from ..trainer import simulate
from .scenario import ScenarioConfig

# Noise iteration tag for evaluation rollouts, disjoint from training iterations.
EVAL_ITERATION = 2**31
EVAL_STREAM = 0xE7A
HIGH_DIM_SUBSAMPLE = 256


@dataclass
class EvalReport:
    terminal_emd: float
    terminal_chamfer: float
    running_cost: float
    min_pairwise_distance: float
    target_min_distance: float
    emd_points: int
    baseline_emd: float | None = None

    @property
    def emd_reduction(self) -> float | None:
        if self.baseline_emd is None or self.baseline_emd == 0:
            return None
        return 1.0 - self.terminal_emd / self.baseline_emd

    def as_dict(self) -> dict:
        out = asdict(self)
        out["emd_reduction"] = self.emd_reduction
        return out


def zero_control(spec) -> NetworkParams:
    """Parameters whose control is identically zero."""
    p = xavier_initialize(spec, 0)
    return p.with_arrays([np.zeros_like(a) for a in p.arrays()])


def min_distance_over_time(traj: TrajectoryBatch) -> float:
    if traj.terminal.shape[0] < 2:
        return math.inf
    return min(kernels.min_pairwise_distance(s.value)[0] for s in traj.states)


def _emd_size(n: int, m: int, dim: int, subsample: int | None) -> int:
    if subsample is None:
        subsample = HIGH_DIM_SUBSAMPLE if dim > 3 else max(n, m)
    k = min(n, m, subsample)
    while k * k > EMD_SIZE_LIMIT:
        k //= 2
    return k


def terminal_emd(x: np.ndarray, z: np.ndarray, k: int, seed: int) -> float:
    rng = np.random.default_rng([seed, EVAL_STREAM, 1])
    xi = rng.choice(len(x), k, replace=False) if k < len(x) else np.arange(len(x))
    zi = rng.choice(len(z), k, replace=False) if k < len(z) else np.arange(len(z))
    return emd_exact(x[np.sort(xi)], z[np.sort(zi)])


def evaluate(
    psi: NetworkParams,
    scenario: ScenarioConfig,
    baseline: bool = True,
    emd_subsample: int | None = None,
    seed: int | None = None,
) -> EvalReport:
    """Roll the frozen control out from the held-out initial states and
    compare the terminal cloud with the held-out target samples."""
    seed = scenario.seed if seed is None else seed
    _, x_test = scenario.initial_samples()
    _, z_test = scenario.target_split()
    k = _emd_size(len(x_test), len(z_test), scenario.dim, emd_subsample)

    def run(params):
        traj = simulate(
            params,
            scenario.control,
            x_test,
            scenario.diffusion,
            scenario.h,
            scenario.T,
            seed=seed,
            control_kind=scenario.control_kind,
            iteration=EVAL_ITERATION,
        )
        return traj, traj.terminal.value

    traj, xt = run(psi)
    running = accumulate_running_cost(
        traj, scenario.cost, h=scenario.h, rng=np.random.default_rng([seed, EVAL_STREAM, 0])
    ).item()
    base = None
    if baseline:
        base = terminal_emd(run(zero_control(scenario.control))[1], z_test, k, seed)
    zmin = kernels.min_pairwise_distance(z_test)[0] if len(z_test) > 1 else math.inf
    return EvalReport(
        terminal_emd=terminal_emd(xt, z_test, k, seed),
        terminal_chamfer=chamfer(xt, z_test).item(),
        running_cost=running,
        min_pairwise_distance=min_distance_over_time(traj),
        target_min_distance=zmin,
        emd_points=k,
        baseline_emd=base,
    )


def format_report(report: EvalReport) -> str:
    lines = []
    for key, val in report.as_dict().items():
        if val is None:
            continue
        lines.append(f"{key}: {val:.6g}" if isinstance(val, float) else f"{key}: {val}")
    return "\n".join(lines)
