import math

import numpy as np
import pytest

from conftest import central_diff, rel_err
from odc import autodiff as ad
from odc.costs import CostSpec, accumulate_running_cost
from odc.dynamics import DiffusionSpec, ParticleBatch, em_step, noise_block, num_steps, rollout
from odc.network import MLPSpec, control_from_potential, xavier_initialize

ZERO = DiffusionSpec("zero")


def const_control(c):
    c = np.asarray(c, dtype=np.float64)
    return lambda x: ad.mul(x, 0.0) + c


def test_em_step_identity():
    x = np.random.default_rng(0).normal(size=(5, 2))
    x1, _ = em_step(ad.Tensor(x), const_control([0.0, 0.0]), ZERO, 0.1)
    assert np.array_equal(x1.value, x)


def test_em_step_constant_drift():
    x = np.random.default_rng(0).normal(size=(5, 2))
    c = np.array([1.0, -2.0])
    x1, _ = em_step(ad.Tensor(x), const_control(c), ZERO, 0.1)
    assert np.allclose(x1.value, x + 0.1 * c, atol=1e-15)


def test_em_step_variance():
    n, s, h = 100_000, 0.3, 0.1
    x = np.zeros((n, 1))
    noise = np.random.default_rng(0).standard_normal((n, 1))
    x1, _ = em_step(ad.Tensor(x), const_control([0.0]), DiffusionSpec.isotropic(s), h, noise)
    d = x1.value[:, 0]
    var = d.var(ddof=1)
    se = s * s * h * math.sqrt(2 / (n - 1))
    assert abs(var - s * s * h) < 3 * se


def test_em_step_requires_noise():
    with pytest.raises(ValueError):
        em_step(ad.Tensor(np.zeros((2, 1))), const_control([0.0]), DiffusionSpec.isotropic(0.1), 0.1)


def test_em_step_non_finite():
    with pytest.raises(ad.NonFiniteError):
        em_step(ad.Tensor(np.ones((1, 1))), lambda x: x * 1e308, ZERO, 1e10)


def test_state_dependent_diffusion():
    diff = DiffusionSpec("state", field=lambda x: ad.mul(x, 0.0) + 2.0)
    x1, _ = em_step(ad.Tensor(np.zeros((2, 1))), const_control([0.0]), diff, 0.25, np.ones((2, 1)))
    assert np.allclose(x1.value, 1.0)


def test_num_steps_and_length():
    assert num_steps(0.1, 1.0) == 10
    assert num_steps(0.3, 1.0) == 3
    traj = rollout(np.zeros((3, 2)), const_control([0.0, 0.0]), ZERO, 0.1, 1.0)
    assert len(traj) == 11
    assert np.allclose(traj.times, np.arange(11) * 0.1)
    with pytest.raises(ValueError):
        num_steps(2.0, 1.0)


def test_linear_ode_decay():
    x0 = np.random.default_rng(0).normal(size=(10, 2))
    traj = rollout(x0, lambda x: -x, ZERO, 1e-3, 1.0)
    expect = x0 * math.exp(-1)
    assert np.abs(traj.terminal.value - expect).max() / np.abs(expect).max() < 2e-3


def test_rollout_deterministic():
    x0 = np.zeros((4, 3))
    a = rollout(x0, const_control([0.1, 0, 0]), DiffusionSpec.isotropic(0.5), 0.1, 1.0, seed=3)
    b = rollout(x0, const_control([0.1, 0, 0]), DiffusionSpec.isotropic(0.5), 0.1, 1.0, seed=3)
    assert a.positions().tobytes() == b.positions().tobytes()
    c = rollout(x0, const_control([0.1, 0, 0]), DiffusionSpec.isotropic(0.5), 0.1, 1.0, seed=4)
    assert not np.array_equal(a.positions(), c.positions())


def test_agent_identity_independent_of_batch():
    full = rollout(np.zeros((6, 2)), const_control([0.0, 0.0]), DiffusionSpec.isotropic(1.0), 0.1, 0.5, seed=1)
    ids = np.array([4, 1])
    sub = rollout(
        np.zeros((2, 2)),
        const_control([0.0, 0.0]),
        DiffusionSpec.isotropic(1.0),
        0.1,
        0.5,
        seed=1,
        agent_ids=ids,
        n_total=6,
    )
    assert np.array_equal(sub.positions(), full.positions()[:, ids])


def test_noise_block_keys():
    a = noise_block(0, 0, 0, 5, 2)
    assert np.array_equal(a, noise_block(0, 0, 0, 5, 2))
    assert not np.array_equal(a, noise_block(0, 1, 0, 5, 2))
    assert not np.array_equal(a, noise_block(0, 0, 1, 5, 2))


def test_zero_diffusion_is_exact_euler():
    x0 = np.random.default_rng(2).normal(size=(3, 2))
    traj = rollout(x0, lambda x: ad.sin(x), DiffusionSpec.isotropic(0.0), 0.1, 1.0, seed=5)
    x = x0.copy()
    for _ in range(10):
        x = x + 0.1 * np.sin(x)
    assert np.array_equal(traj.terminal.value, x)


def test_mean_drift_and_variance_growth():
    n, s, T = 100_000, 0.5, 1.0
    c = np.array([0.3, -0.2])
    x0 = np.random.default_rng(9).normal(size=(n, 2)) * 0.1
    traj = rollout(x0, const_control(c), DiffusionSpec.isotropic(s), 0.1, T, seed=2)
    disp = traj.terminal.value - x0
    se = s * math.sqrt(T / n)
    assert np.all(np.abs(disp.mean(axis=0) - c * T) < 3 * se)
    var = traj.terminal.value.var(axis=0, ddof=1)
    target = s * s * T + x0.var(axis=0, ddof=1)
    assert np.all(np.abs(var - target) < 3 * target * math.sqrt(2 / (n - 1)))


def test_running_cost_gradient_flow_through():
    spec = MLPSpec(2, 1, 4, 1)
    p = xavier_initialize(spec, 0)
    x0 = np.array([[0.5, -0.3], [1.0, 0.8]])
    h, T = 0.1, 0.3
    cost = CostSpec()

    def value(w0):
        q = p.copy()
        q.weights[0] = w0
        traj = rollout(x0, lambda x: control_from_potential(q, spec, x), DiffusionSpec.isotropic(0.2), h, T, seed=1)
        return accumulate_running_cost(traj, cost).item() + float(np.sum(traj.terminal.value**2))

    tape = ad.Tape()
    theta = p.on_tape(tape)
    traj = rollout(
        tape.constant(x0),
        lambda x: control_from_potential(theta, spec, x),
        DiffusionSpec.isotropic(0.2),
        h,
        T,
        seed=1,
    )
    out = accumulate_running_cost(traj, cost) + ad.sqnorm(traj.terminal)
    g = ad.reverse_gradient(out, theta[0])[0].value
    assert rel_err(g, central_diff(value, p.weights[0])) < 1e-4


def test_particle_batch_invariants():
    with pytest.raises(ValueError):
        ParticleBatch(np.array([[np.nan, 0.0]]))
    with pytest.raises(ValueError):
        DiffusionSpec.isotropic(-1.0)
