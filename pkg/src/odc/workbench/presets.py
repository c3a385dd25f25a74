"""Built-in scenario presets at the published experimental settings."""

from __future__ import annotations

import copy

import numpy as np
import yaml

from .scenario import ScenarioConfig, load_scenario_text

_TRAIN = {
    "gamma": 10.0,
    "outer_iters": 10000,
    "inner_iters": 6,
    "learning_rate": 1.0e-4,
    "optimizer": "adam",
    "batch_size": 1500,
    "matcher": "wasserstein_dual",
}
_PSI = {"kind": "gradient", "hidden_layers": 3, "hidden_width": 36, "activation": "tanh"}
_PHI = {"hidden_layers": 6, "hidden_width": 256, "activation": "tanh"}


def _grid(n: int, spacing: float, offset=(0.0, 0.0)) -> list[list[float]]:
    g = np.arange(n) * spacing
    return [[float(a + offset[0]), float(b + offset[1])] for b in g for a in g]


def _syn1() -> dict:
    return {
        "name": "syn1-lowdim-sde",
        "dim": 3,
        "seed": 0,
        "h": 0.1,
        "T": 1.0,
        "N": 2000,
        "split": {"train": 0.75, "test": 0.25},
        "initial": {
            "mixture": [
                {"weight": 0.5, "mean": [-2.0, -2.0, 0.0], "std": 0.3},
                {"weight": 0.5, "mean": [-2.0, 2.0, 0.0], "std": 0.3},
            ]
        },
        "target": {
            "mixture": [
                {"weight": 0.5, "mean": [2.0, 0.0, -1.5], "std": 0.3},
                {"weight": 0.5, "mean": [2.0, 0.0, 1.5], "std": 0.3},
            ]
        },
        "cost": {"base": "quadratic_energy"},
        "diffusion": {"kind": "isotropic", "sigma": 0.01},
        "control": dict(_PSI),
        "critic": dict(_PHI),
        "train": dict(_TRAIN),
    }


def _syn2() -> dict:
    d = 100

    def at(**coords) -> list[float]:
        v = [0.0] * d
        for k, val in coords.items():
            v[int(k[1:])] = val
        return v

    # two tight clusters, each with its own partner; the other 97 axes stay put
    return {
        "name": "syn2-highdim",
        "dim": d,
        "seed": 0,
        "h": 0.1,
        "T": 1.0,
        "N": 2000,
        "split": {"train": 0.75, "test": 0.25},
        "initial": {
            "mixture": [
                {"weight": 0.5, "mean": at(x0=-3.0, x1=-2.0), "std": 0.05},
                {"weight": 0.5, "mean": at(x0=-3.0, x1=2.0), "std": 0.05},
            ]
        },
        "target": {
            "mixture": [
                {"weight": 0.5, "mean": at(x0=3.0, x1=-2.0, x2=2.0), "std": 0.05},
                {"weight": 0.5, "mean": at(x0=3.0, x1=2.0, x2=-2.0), "std": 0.05},
            ]
        },
        "cost": {"base": "quadratic_energy"},
        "diffusion": {"kind": "isotropic", "sigma": 0.01},
        "control": dict(_PSI),
        "critic": dict(_PHI),
        "train": dict(_TRAIN),
    }


def _syn3() -> dict:
    return {
        "name": "syn3-collision",
        "dim": 2,
        "seed": 0,
        "h": 0.1,
        "T": 20.0,
        "N": 16,
        "initial": {"points": _grid(4, 2.0, (-8.0, -3.0))},
        "target": {"points": _grid(4, 1.0, (5.0, 0.0))},
        "cost": {
            "base": "quadratic_energy",
            "interaction": {"kernel": "inverse_power", "c": 1.0, "alpha": 2.0, "weight": 5.0},
        },
        "diffusion": {"kind": "zero"},
        "control": dict(_PSI),
        "critic": dict(_PHI),
        "train": {**_TRAIN, "batch_size": 16},
    }


def _auv() -> dict:
    rng = np.random.default_rng(2024)
    starts = rng.uniform([0.1, 0.1], [0.4, 0.9], size=(10, 2)).round(3)
    goals = rng.uniform([1.6, 0.1], [1.9, 0.9], size=(10, 2)).round(3)

    def mix(pts):
        return {"mixture": [{"weight": 0.1, "mean": p.tolist(), "std": 0.03} for p in pts]}

    return {
        "name": "flowfield-auv",
        "dim": 2,
        "seed": 0,
        "h": 0.1,
        "T": 1.0,
        "N": 2000,
        "split": {"train": 0.75, "test": 0.25},
        "initial": mix(starts),
        "target": mix(goals),
        "cost": {"base": "flow_deviation", "flow": {"preset": "double_gyre", "amplitude": 0.5, "length": 1.0}},
        "diffusion": {"kind": "isotropic", "sigma": 0.01},
        "control": {**_PSI, "residual": True},
        "critic": dict(_PHI),
        "train": dict(_TRAIN),
    }


PRESETS = {
    "syn1-lowdim-sde": _syn1,
    "syn2-highdim": _syn2,
    "syn3-collision": _syn3,
    "flowfield-auv": _auv,
}


def preset_names() -> list[str]:
    return list(PRESETS)


def preset_dict(name: str) -> dict:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return copy.deepcopy(PRESETS[name]())


def emit_preset(name: str) -> str:
    return yaml.safe_dump(preset_dict(name), sort_keys=False, default_flow_style=None)


def load_preset(name: str) -> ScenarioConfig:
    return load_scenario_text(emit_preset(name), f"<preset {name}>")
