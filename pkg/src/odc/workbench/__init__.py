"""Scenario configuration, persistence, evaluation and presets."""

from .evaluate import EvalReport, evaluate
from .flows import make_flow, synthetic_flow_field
from .io import (
    CheckpointError,
    export_trajectories,
    load_checkpoint,
    load_point_cloud,
    save_checkpoint,
    save_point_cloud,
)
from .presets import emit_preset, load_preset, preset_names
from .scenario import (
    ConfigError,
    GaussianMixtureSpec,
    ScenarioConfig,
    load_scenario,
    load_scenario_text,
    sample_mixture,
)

__all__ = [
    "CheckpointError",
    "ConfigError",
    "EvalReport",
    "GaussianMixtureSpec",
    "ScenarioConfig",
    "emit_preset",
    "evaluate",
    "export_trajectories",
    "load_checkpoint",
    "load_point_cloud",
    "load_preset",
    "load_scenario",
    "load_scenario_text",
    "make_flow",
    "preset_names",
    "sample_mixture",
    "save_checkpoint",
    "save_point_cloud",
    "synthetic_flow_field",
]
