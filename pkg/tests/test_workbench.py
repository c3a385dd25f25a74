import math
import textwrap

import numpy as np
import pytest
import yaml

from odc import autodiff as ad
from odc.dynamics import DiffusionSpec, rollout
from odc.matching import PointCloud, emd_exact
from odc.trainer import init_state, odc_train
from odc.workbench import flows
from odc.workbench.evaluate import evaluate, zero_control
from odc.workbench.io import (
    CheckpointError,
    MetricsWriter,
    export_trajectories,
    load_checkpoint,
    load_point_cloud,
    load_trajectories,
    read_metrics,
    save_checkpoint,
    save_point_cloud,
)
from odc.workbench.presets import emit_preset, load_preset, preset_names
from odc.workbench.scenario import (
    ConfigError,
    GaussianMixtureSpec,
    load_scenario,
    load_scenario_text,
    sample_mixture,
)

TOY = textwrap.dedent(
    """\
    name: toy
    dim: 2
    seed: 3
    h: 0.1
    T: 0.5
    N: 40
    split: {train: 0.75, test: 0.25}
    initial:
      mixture:
      - {weight: 1.0, mean: [0.0, 0.0], std: 0.1}
    target:
      mixture:
      - {weight: 0.5, mean: [1.0, 0.0], std: 0.1}
      - {weight: 0.5, mean: [1.0, 1.0], cov: [0.01, 0.02]}
    diffusion: {kind: isotropic, sigma: 0.01}
    control: {hidden_layers: 1, hidden_width: 8}
    critic: {hidden_layers: 1, hidden_width: 8}
    train: {outer_iters: 4, batch_size: 16, learning_rate: 0.001, gamma: 5}
    """
)


# --- mixtures ----------------------------------------------------------------


def test_mixture_zero_covariance():
    spec = GaussianMixtureSpec.single([1.0, -2.0], 0.0)
    pts = sample_mixture(spec, 10, 0).points
    assert np.array_equal(pts, np.tile([1.0, -2.0], (10, 1)))


def test_mixture_standard_normal_mean():
    n = 100_000
    pts = sample_mixture(GaussianMixtureSpec.single(np.zeros(3), 1.0), n, 1).points
    assert np.all(np.abs(pts.mean(axis=0)) < 3 / math.sqrt(n))


def test_mixture_deterministic():
    spec = GaussianMixtureSpec([0.3, 0.7], [[0, 0], [5, 5]], [[1, 1], [0.5, 2]])
    a = sample_mixture(spec, 50, 9).points
    b = sample_mixture(spec, 50, 9).points
    assert np.array_equal(a, b)


def test_mixture_full_covariance_moments():
    cov = np.array([[2.0, 0.8], [0.8, 1.0]])
    pts = sample_mixture(GaussianMixtureSpec.single([0, 0], cov), 200_000, 2).points
    assert np.allclose(np.cov(pts.T), cov, atol=0.03)


def test_mixture_rejects_bad_specs():
    with pytest.raises(ValueError, match="semidefinite"):
        GaussianMixtureSpec.single([0, 0], np.array([[1.0, 2.0], [2.0, 1.0]]))
    with pytest.raises(ValueError):
        GaussianMixtureSpec([0.5, 0.6], [[0], [1]], [[1], [1]])
    with pytest.raises(ValueError):
        GaussianMixtureSpec([-1.0, 2.0], [[0], [1]], [[1], [1]])


# --- flows -------------------------------------------------------------------


def test_uniform_flow():
    v = flows.synthetic_flow_field("uniform", np.array([3.0, -7.0]), velocity=[0.2, -0.1])
    assert np.array_equal(v, [0.2, -0.1])


def test_rigid_rotation_at_origin():
    assert np.array_equal(flows.synthetic_flow_field("single_gyre", np.zeros(2), omega=2.0), [0.0, 0.0])
    v = flows.synthetic_flow_field("single_gyre", np.array([1.0, 0.0]), omega=2.0)
    assert np.allclose(v, [0.0, 2.0])


@pytest.mark.parametrize("preset", ["single_gyre", "double_gyre"])
def test_gyres_divergence_free(preset):
    pts = np.random.default_rng(0).uniform(-1, 2, size=(100, 2))
    eps = 1e-5
    ex, ey = np.array([eps, 0.0]), np.array([0.0, eps])
    f = lambda p: flows.synthetic_flow_field(preset, p)  # noqa: E731
    div = (f(pts + ex)[:, 0] - f(pts - ex)[:, 0] + f(pts + ey)[:, 1] - f(pts - ey)[:, 1]) / (2 * eps)
    assert np.abs(div).max() < 1e-6


def test_unknown_flow_preset():
    with pytest.raises(ValueError):
        flows.synthetic_flow_field("tornado", np.zeros(2))


def test_gridded_flow(tmp_path):
    xs, ys = np.linspace(0, 1, 5), np.linspace(0, 2, 6)
    path = tmp_path / "flow.csv"
    with open(path, "w") as fh:
        fh.write("x,y,vx,vy\n")
        for y in ys:
            for x in xs:
                fh.write(f"{x},{y},{2 * x + y},{x - 3 * y}\n")
    grid = flows.make_flow({"file": str(path)})
    p = np.array([[0.33, 1.21], [0.9, 0.1]])
    # bilinear interpolation reproduces linear fields exactly
    assert np.allclose(grid(p).value, np.c_[2 * p[:, 0] + p[:, 1], p[:, 0] - 3 * p[:, 1]], atol=1e-12)
    tape = ad.Tape()
    x = tape.variable(p)
    g = ad.reverse_gradient(ad.tsum(ad.take(grid(x), [0], axis=1)), x)[0].value
    assert np.allclose(g, [[2.0, 1.0], [2.0, 1.0]])
    # outside the grid values clamp
    assert np.allclose(grid(np.array([[5.0, 1.0]])).value, [[3.0, -2.0]])


def test_gridded_flow_rejects_incomplete(tmp_path):
    path = tmp_path / "flow.csv"
    path.write_text("x,y,vx,vy\n0,0,1,1\n1,0,1,1\n0,1,1,1\n")
    with pytest.raises(ValueError):
        flows.GriddedFlow.from_csv(path)


# --- point clouds ------------------------------------------------------------


def test_point_cloud_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    pts = rng.normal(size=(20, 3)) * 10.0 ** rng.integers(-8, 8, size=(20, 3))
    w = rng.random(20)
    cloud = PointCloud(pts, w / w.sum())
    save_point_cloud(tmp_path / "c.csv", cloud)
    back = load_point_cloud(tmp_path / "c.csv")
    assert np.array_equal(back.points, cloud.points)
    assert np.allclose(back.weights, cloud.weights, rtol=1e-15)
    save_point_cloud(tmp_path / "u.csv", PointCloud(pts))
    assert np.array_equal(load_point_cloud(tmp_path / "u.csv").points, pts)
    assert (tmp_path / "u.csv").read_text().splitlines()[0] == "x0,x1,x2"


def test_point_cloud_dimension_mismatch(tmp_path):
    p = tmp_path / "c.csv"
    p.write_text("x0,x1,x2\n1,2,3\n")
    with pytest.raises(ValueError):
        load_point_cloud(p, dim=2)


@pytest.mark.parametrize(
    "body, ok",
    [
        ("x0,weight\n0,0.5\n1,0.505\n", True),
        ("x0,weight\n0,0.5\n1,0.48\n", False),
        ("x0,weight\n0,-0.5\n1,1.5\n", False),
        ("x0,x1\n0,1\n1\n", False),
        ("x0,x1\n0,a\n", False),
        ("a,b\n0,1\n", False),
    ],
)
def test_point_cloud_fixtures(tmp_path, body, ok):
    p = tmp_path / "c.csv"
    p.write_text(body)
    if ok:
        cloud = load_point_cloud(p)
        assert abs(cloud.weights.sum() - 1) < 1e-15
        assert np.allclose(cloud.weights, np.array([0.5, 0.505]) / 1.005)
    else:
        with pytest.raises(ValueError):
            load_point_cloud(p)


# --- trajectories and metrics ------------------------------------------------


def test_trajectory_export(tmp_path):
    x0 = np.random.default_rng(0).normal(size=(7, 2))
    traj = rollout(x0, lambda x: ad.mul(x, -1.0), DiffusionSpec.isotropic(0.1), 0.1, 1.0, seed=1)
    path = tmp_path / "t.csv"
    export_trajectories(traj, path)
    lines = path.read_text().splitlines()
    assert lines[0] == "t,agent_id,x0,x1"
    assert len(lines) - 1 == (math.floor(1.0 / 0.1) + 1) * 7
    times, ids, pos = load_trajectories(path)
    assert np.array_equal(times, traj.times)
    assert np.array_equal(ids, np.arange(7))
    assert np.array_equal(pos, traj.positions())
    rows = [tuple(map(float, r.split(",")[:2])) for r in lines[1:]]
    assert rows == sorted(rows)


def test_metrics_writer(tmp_path):
    scen = load_scenario_text(TOY)
    _, metrics = odc_train(scen.problem())
    path = tmp_path / "m.csv"
    with MetricsWriter(path, every=2) as w:
        for k in range(1, len(metrics) + 1):
            part = type(metrics)()
            for col in ("iteration", "objective", "running_cost", "match_value", "grad_map_norm", "wall_ms"):
                getattr(part, col).extend(getattr(metrics, col)[:k])
            w.record(part, force=k == len(metrics))
    data = read_metrics(path)
    assert path.read_text().splitlines()[0] == "iter,objective,running_cost,match_value,grad_map_norm,wall_ms"
    assert list(data["iter"]) == [0, 2, 3]
    assert data["objective"][1] == metrics.objective[2]


# --- checkpoints -------------------------------------------------------------


def _trained(tmp_path, iters=None):
    scen = load_scenario_text(TOY)
    problem = scen.problem()
    state, _ = odc_train(problem, iterations=iters)
    path = tmp_path / "ck.odc"
    save_checkpoint(path, state, scen.to_yaml(), scen.scenario_hash(), scen.seed)
    return scen, problem, state, path


def test_checkpoint_roundtrip(tmp_path):
    scen, problem, state, path = _trained(tmp_path)
    ck = load_checkpoint(path)
    assert ck.iteration == state.iteration
    assert ck.seed == scen.seed
    assert ck.meta["scenario_hash"] == scen.scenario_hash()
    back = ck.restore(init_state(problem))
    for a, b in zip(state.psi.arrays() + state.phi.arrays(), back.psi.arrays() + back.phi.arrays()):
        assert np.array_equal(a, b)
    for a, b in zip(state.phi.spectral_state, back.phi.spectral_state):
        assert np.array_equal(a, b)
    assert back.theta_opt.state.t == state.theta_opt.state.t
    assert all(np.array_equal(a, b) for a, b in zip(back.eta_opt.state.v, state.eta_opt.state.v))
    assert load_scenario_text(ck.config_text).scenario_hash() == scen.scenario_hash()


def test_checkpoint_resume_bit_identical(tmp_path):
    scen = load_scenario_text(TOY).with_overrides(outer_iters=8)
    problem = scen.problem()
    full_state, full = odc_train(problem)
    state, m1 = odc_train(problem, iterations=4)
    path = tmp_path / "half.odc"
    save_checkpoint(path, state, scen.to_yaml(), scen.scenario_hash(), scen.seed)
    resumed = load_checkpoint(path).restore(init_state(problem))
    resumed, m2 = odc_train(problem, resumed)
    assert m1.rows() + m2.rows() == full.rows()
    a, b = tmp_path / "a.odc", tmp_path / "b.odc"
    save_checkpoint(a, full_state, scen.to_yaml(), scen.scenario_hash(), scen.seed)
    save_checkpoint(b, resumed, scen.to_yaml(), scen.scenario_hash(), scen.seed)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_errors(tmp_path):
    scen, problem, state, path = _trained(tmp_path)
    data = path.read_bytes()
    bad = tmp_path / "bad.odc"
    bad.write_bytes(data[:-8])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(bad)
    bad.write_bytes(data.replace(b"ODC-CHECKPOINT 1", b"ODC-CHECKPOINT 9", 1))
    with pytest.raises(CheckpointError, match="version"):
        load_checkpoint(bad)
    bad.write_bytes(data.replace(b"iteration ", b"iteration", 1).replace(b"arrays ", b"arrays x", 1))
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(bad)
    bad.write_bytes(b"garbage")
    with pytest.raises(CheckpointError):
        load_checkpoint(bad)
    other = load_scenario_text(TOY.replace("hidden_width: 8}\ncritic", "hidden_width: 9}\ncritic"))
    with pytest.raises(CheckpointError, match="shape"):
        load_checkpoint(path).restore(init_state(other.problem()))


# --- scenario parsing --------------------------------------------------------


def test_scenario_parse_values():
    s = load_scenario_text(TOY)
    assert (s.dim, s.h, s.T, s.N, s.n_train, s.steps) == (2, 0.1, 0.5, 40, 30, 5)
    assert s.train.gamma == 5.0 and s.train.outer_iters == 4
    x_train, x_test = s.initial_samples()
    assert x_train.shape == (30, 2) and x_test.shape == (10, 2)
    z_train, z_test = s.target_split()
    assert len(z_train) + len(z_test) == 40


def test_scenario_line_numbers():
    bad = TOY.replace("N: 40", "N: 1")
    with pytest.raises(ConfigError) as err:
        load_scenario_text(bad, "toy.yaml")
    assert err.value.line == 6
    assert str(err.value).startswith("toy.yaml:6:")
    with pytest.raises(ConfigError) as err:
        load_scenario_text(TOY.replace("std: 0.1}\ntarget", "std: oops}\ntarget"))
    assert err.value.line == 10
    with pytest.raises(ConfigError) as err:
        load_scenario_text(TOY + "train_extra: 1\n")
    assert err.value.line == 19
    with pytest.raises(ConfigError) as err:
        load_scenario_text("dim: [1\n")
    assert err.value.line is not None


@pytest.mark.parametrize(
    "old, new",
    [
        ("h: 0.1", "h: 0.0"),
        ("h: 0.1", "h: 2.0"),
        ("dim: 2", "dim: 0"),
        ("test: 0.25", "test: 0.5"),
        ("weight: 0.5, mean: [1.0, 0.0]", "weight: 0.4, mean: [1.0, 0.0]"),
        ("cov: [0.01, 0.02]", "cov: [[1, 2], [2, 1]]"),
        ("kind: isotropic", "kind: brownian"),
        ("gamma: 5", "gamma: -5"),
    ],
)
def test_scenario_invariants(old, new):
    assert old in TOY
    with pytest.raises(ConfigError):
        load_scenario_text(TOY.replace(old, new))


def test_scenario_seed_env_override(monkeypatch):
    monkeypatch.setenv("ODC_SEED", "77")
    s = load_scenario_text(TOY)
    assert s.seed == 77
    assert yaml.safe_load(s.to_yaml())["seed"] == 77


def test_scenario_point_file(tmp_path):
    save_point_cloud(tmp_path / "target.csv", PointCloud(np.array([[1.0, 2.0], [3.0, 4.0]])))
    text = TOY.replace(
        "target:\n  mixture:\n  - {weight: 0.5, mean: [1.0, 0.0], std: 0.1}\n"
        "  - {weight: 0.5, mean: [1.0, 1.0], cov: [0.01, 0.02]}\n",
        "target: {file: target.csv}\n",
    )
    cfg = tmp_path / "s.yaml"
    cfg.write_text(text)
    s = load_scenario(cfg)
    assert np.array_equal(s.target_split()[0], [[1.0, 2.0], [3.0, 4.0]])
    # the stored config resolves the path so it reloads from anywhere
    assert np.array_equal(load_scenario_text(s.to_yaml()).target_split()[0], [[1.0, 2.0], [3.0, 4.0]])


def test_presets_schema():
    assert preset_names() == ["syn1-lowdim-sde", "syn2-highdim", "syn3-collision", "flowfield-auv"]
    for name in preset_names():
        s = load_preset(name)
        assert s.train.outer_iters == 10_000 and s.train.inner_iters == 6
        assert yaml.safe_load(emit_preset(name))["name"] == name
    s1 = load_preset("syn1-lowdim-sde")
    assert (s1.h, s1.T, s1.diffusion.sigma, s1.N, s1.dim) == (0.1, 1.0, 0.01, 2000, 3)
    assert (s1.control.hidden_layers, s1.control.hidden_width) == (3, 36)
    assert (s1.critic.hidden_layers, s1.critic.hidden_width) == (6, 256)
    assert s1.train.learning_rate == 1e-4
    assert load_preset("syn2-highdim").dim == 100
    s3 = load_preset("syn3-collision")
    assert s3.T == 20 and s3.cost.interaction.alpha == 2.0 and s3.cost.interaction.c == 1.0
    from odc import kernels

    assert abs(kernels.min_pairwise_distance(s3.target_split()[0])[0] - 1.0) < 1e-12
    auv = load_preset("flowfield-auv")
    assert auv.cost.base == "flow_deviation" and auv.control.residual


# --- evaluation --------------------------------------------------------------


def test_evaluate_fields_finite():
    s = load_scenario_text(TOY)
    state, _ = odc_train(s.problem())
    r = evaluate(state.psi, s)
    for key, val in r.as_dict().items():
        if val is not None and key != "emd_reduction":
            assert math.isfinite(val) and val >= 0, key


def test_evaluate_zero_control_direct_oracle():
    s = load_scenario_text(TOY.replace("kind: isotropic, sigma: 0.01", "kind: zero"))
    r = evaluate(zero_control(s.control), s)
    x_test = s.initial_samples()[1]
    z_test = s.target_split()[1]
    assert abs(r.terminal_emd - emd_exact(x_test, z_test)) < 1e-12
    assert r.baseline_emd == r.terminal_emd


def test_evaluate_same_density_noise_floor():
    text = TOY.replace("N: 40", "N: 800").replace(
        "target:\n  mixture:\n  - {weight: 0.5, mean: [1.0, 0.0], std: 0.1}\n"
        "  - {weight: 0.5, mean: [1.0, 1.0], cov: [0.01, 0.02]}\n",
        "target:\n  mixture:\n  - {weight: 1.0, mean: [0.0, 0.0], std: 0.1}\n",
    )
    s = load_scenario_text(text.replace("kind: isotropic, sigma: 0.01", "kind: zero"))
    r = evaluate(zero_control(s.control), s, baseline=False)
    spec = GaussianMixtureSpec.single([0.0, 0.0], 0.01)
    floors = [emd_exact(sample_mixture(spec, 200, [k, 0]).points, sample_mixture(spec, 200, [k, 1]).points) for k in range(5)]
    assert 0.7 * min(floors) <= r.terminal_emd <= 1.3 * max(floors)
