import json
import os
import subprocess
import sys

import numpy as np
import pytest
import yaml

from odc.cli import main
from odc.workbench.io import load_checkpoint, load_point_cloud, load_trajectories, read_metrics
from odc.workbench.scenario import load_scenario_text

from test_workbench import TOY


@pytest.fixture
def toy(tmp_path):
    path = tmp_path / "toy.yaml"
    path.write_text(TOY)
    return path


def test_presets_list(capsys):
    assert main(["presets", "list"]) == 0
    assert capsys.readouterr().out.split() == ["syn1-lowdim-sde", "syn2-highdim", "syn3-collision", "flowfield-auv"]


def test_presets_emit_parses(capsys):
    assert main(["presets", "emit", "syn1-lowdim-sde"]) == 0
    s = load_scenario_text(capsys.readouterr().out)
    assert (s.h, s.T, s.diffusion.sigma, s.N) == (0.1, 1.0, 0.01, 2000)


def test_presets_emit_unknown():
    assert main(["presets", "emit", "nope"]) == 1
    assert main(["presets", "emit"]) == 1


def test_train_writes_run_dir(toy, tmp_path):
    out = tmp_path / "run"
    assert main(["train", str(toy), "--outdir", str(out), "--iters", "10", "--quiet"]) == 0
    assert {p.name for p in out.iterdir()} == {"config.yaml", "seed", "metrics.csv", "checkpoint.odc"}
    m = read_metrics(out / "metrics.csv")
    assert list(m["iter"]) == list(range(10))
    assert np.all(m["wall_ms"] == 0)
    assert load_checkpoint(out / "checkpoint.odc").iteration == 10
    assert (out / "seed").read_text().strip() == "3"


def test_train_deterministic(toy, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["train", str(toy), "--outdir", str(d), "--quiet"]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "checkpoint.odc").read_bytes() == (b / "checkpoint.odc").read_bytes()


def test_train_flags(toy, tmp_path):
    out = tmp_path / "c"
    args = ["train", str(toy), "--outdir", str(out), "--matcher", "chamfer", "--seed", "11"]
    assert main(args + ["--metrics-every", "3", "--quiet"]) == 0
    cfg = yaml.safe_load((out / "config.yaml").read_text())
    assert cfg["seed"] == 11 and cfg["train"]["matcher"] == "chamfer"
    assert list(read_metrics(out / "metrics.csv")["iter"]) == [0, 3]


def test_seed_env_override(toy, tmp_path, monkeypatch):
    monkeypatch.setenv("ODC_SEED", "5")
    out = tmp_path / "env"
    assert main(["train", str(toy), "--outdir", str(out), "--quiet"]) == 0
    assert (out / "seed").read_text().strip() == "5"


def test_resume_matches_continuous(toy, tmp_path):
    full, half = tmp_path / "full", tmp_path / "half"
    assert main(["train", str(toy), "--outdir", str(full), "--iters", "8", "--quiet"]) == 0
    assert main(["train", str(toy), "--outdir", str(half), "--iters", "4", "--quiet"]) == 0
    ck = str(half / "checkpoint.odc")
    assert main(["train", "--resume", ck, "--iters", "8", "--outdir", str(half), "--quiet"]) == 0
    assert (half / "metrics.csv").read_bytes() == (full / "metrics.csv").read_bytes()
    assert (half / "checkpoint.odc").read_bytes() == (full / "checkpoint.odc").read_bytes()


def test_malformed_config_reports_line(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text(TOY.replace("h: 0.1", "h: [0.1"))
    assert main(["train", str(bad), "--quiet"]) == 1
    err = capsys.readouterr().err
    assert "bad.yaml:" in err and any(ch.isdigit() for ch in err.split("bad.yaml:")[1][:3])
    bad.write_text(TOY.replace("T: 0.5", "T: -1"))
    assert main(["train", str(bad), "--quiet"]) == 1
    assert "bad.yaml:5:" in capsys.readouterr().err


def test_usage_errors(toy):
    assert main(["frobnicate"]) == 1
    assert main(["train", str(toy), "--bogus"]) == 1
    assert main(["train", str(toy), "--matcher", "sinkhorn"]) == 1
    assert main(["train"]) == 1
    assert main([]) == 1
    assert main(["evaluate", "/nonexistent.odc"]) == 1


def test_numeric_failure_exit_code(tmp_path):
    diverge = TOY.replace("learning_rate: 0.001", "learning_rate: 1.0e+300").replace(
        "diffusion: {kind: isotropic, sigma: 0.01}", "diffusion: {kind: isotropic, sigma: 1.0e+200}"
    )
    cfg = tmp_path / "d.yaml"
    cfg.write_text(diverge)
    assert main(["train", str(cfg), "--outdir", str(tmp_path / "d"), "--quiet"]) == 2


def test_evaluate_simulate_export(toy, tmp_path, capsys):
    out = tmp_path / "run"
    assert main(["train", str(toy), "--outdir", str(out), "--quiet"]) == 0
    ck = str(out / "checkpoint.odc")
    capsys.readouterr()
    assert main(["evaluate", ck, "--json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["terminal_emd"] >= 0 and report["baseline_emd"] >= 0
    traj_path = tmp_path / "t.csv"
    assert main(["simulate", ck, "--out", str(traj_path)]) == 0
    times, ids, pos = load_trajectories(traj_path)
    assert pos.shape == (6, 10, 2)
    exp = tmp_path / "exp"
    assert main(["export", ck, "--out", str(exp)]) == 0
    assert {p.name for p in exp.iterdir()} == {"trajectories.csv", "target.csv", "terminal.csv"}
    assert np.array_equal(load_point_cloud(exp / "terminal.csv").points, pos[-1])


def test_console_script_entry_point(tmp_path):
    env = dict(os.environ, PYTHONPATH=os.pathsep.join(sys.path))
    out = subprocess.run(
        [sys.executable, "-m", "odc.cli", "presets", "list"], capture_output=True, text=True, env=env
    )
    assert out.returncode == 0 and "syn3-collision" in out.stdout
