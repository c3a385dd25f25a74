"""Command-line entry point: ``odc train|simulate|evaluate|export|presets``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .autodiff import NonFiniteError
from .costs import CollisionError
from .matching import PointCloud
from .trainer import TrainingDiverged, TrainMetrics, init_state, odc_train, simulate
from .workbench.evaluate import EVAL_ITERATION, evaluate, format_report
from .workbench.io import (
    CheckpointError,
    MetricsWriter,
    export_trajectories,
    load_checkpoint,
    save_checkpoint,
    save_point_cloud,
)
from .workbench.presets import emit_preset, preset_names
from .workbench.scenario import ConfigError, ScenarioConfig, load_scenario, load_scenario_text

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
MATCHERS = {"wasserstein": "wasserstein_dual", "chamfer": "chamfer"}
CHECKPOINT_NAME = "checkpoint.odc"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="odc", description="Optimal density control by particle simulation.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser, required=True)

    t = sub.add_parser("train", help="train a control from a scenario config")
    t.add_argument("config", nargs="?", help="scenario file (omit with --resume)")
    t.add_argument("--seed", type=int)
    t.add_argument("--outdir")
    t.add_argument("--metrics-every", type=int, default=1)
    t.add_argument("--matcher", choices=sorted(MATCHERS))
    t.add_argument("--iters", type=int, help="override the number of outer iterations")
    t.add_argument("--resume", help="continue from a checkpoint")
    t.add_argument("--timing", action="store_true", help="record wall-clock time per iteration")
    t.add_argument("--quiet", action="store_true")

    s = sub.add_parser("simulate", help="roll out a trained control on held-out initial states")
    s.add_argument("checkpoint")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="trajectory CSV path")

    e = sub.add_parser("evaluate", help="held-out evaluation report")
    e.add_argument("checkpoint")
    e.add_argument("--seed", type=int)
    e.add_argument("--no-baseline", action="store_true")
    e.add_argument("--json", action="store_true")

    x = sub.add_parser("export", help="write trajectories and point clouds as CSV")
    x.add_argument("checkpoint")
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int)

    pr = sub.add_parser("presets", help="list or emit built-in scenario configs")
    pr.add_argument("action", choices=["list", "emit"])
    pr.add_argument("name", nargs="?")
    pr.add_argument("--out")
    return p


def _scenario_from_checkpoint(ckpt, path) -> ScenarioConfig:
    return load_scenario_text(ckpt.config_text, f"{path}:config")


def _restore(path, seed=None):
    ckpt = load_checkpoint(path)
    sc = _scenario_from_checkpoint(ckpt, path)
    if seed is not None:
        sc = sc.with_overrides(seed=seed)
    problem = sc.problem()
    state = ckpt.restore(init_state(problem))
    return ckpt, sc, problem, state


def cmd_train(args) -> int:
    overrides = {}
    if args.matcher:
        overrides["matcher"] = MATCHERS[args.matcher]
    if args.iters is not None:
        overrides["outer_iters"] = args.iters
    if args.seed is not None:
        overrides["seed"] = args.seed

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        sc = _scenario_from_checkpoint(ckpt, args.resume)
        if args.iters is not None:
            sc = sc.with_overrides(outer_iters=args.iters)
        if sc.scenario_hash() != ckpt.meta.get("scenario_hash") and args.iters is None:
            raise CheckpointError(f"{args.resume}: scenario hash does not match the stored config")
        problem = sc.problem()
        state = ckpt.restore(init_state(problem))
    else:
        if not args.config:
            raise UsageError("odc train: a config file is required unless --resume is given")
        sc = load_scenario(args.config)
        if overrides:
            sc = sc.with_overrides(**overrides)
        problem = sc.problem()
        state = init_state(problem)

    outdir = Path(args.outdir or f"runs/{sc.name}-seed{sc.seed}")
    outdir.mkdir(parents=True, exist_ok=True)
    config_text = sc.to_yaml()
    (outdir / "config.yaml").write_text(config_text, encoding="utf-8")
    (outdir / "seed").write_text(f"{sc.seed}\n", encoding="utf-8")

    metrics = TrainMetrics()
    writer = MetricsWriter(outdir / "metrics.csv", args.metrics_every, append=bool(args.resume))
    total = sc.train.outer_iters

    def on_iter(st, m):
        writer.record(m, force=st.iteration >= total)
        if not args.quiet and (st.iteration % max(1, total // 10) == 0 or st.iteration == total):
            print(
                f"iter {st.iteration}/{total} objective {m.objective[-1]:.5g} "
                f"running {m.running_cost[-1]:.5g} match {m.match_value[-1]:.5g}",
                file=sys.stderr,
            )

    try:
        state, metrics = odc_train(problem, state, metrics, callback=on_iter, timing=args.timing)
    finally:
        writer.record(metrics, force=True)
        writer.close()
    save_checkpoint(outdir / CHECKPOINT_NAME, state, config_text, sc.scenario_hash(), sc.seed)
    print(str(outdir))
    return EXIT_OK


def cmd_simulate(args) -> int:
    _, sc, _, state = _restore(args.checkpoint, args.seed)
    _, x_test = sc.initial_samples()
    traj = simulate(
        state.psi, sc.control, x_test, sc.diffusion, sc.h, sc.T, sc.seed, sc.control_kind, EVAL_ITERATION
    )
    if args.out:
        export_trajectories(traj, args.out)
    term = traj.terminal.value
    print(f"agents {len(term)} steps {len(traj) - 1}")
    print("terminal mean " + " ".join(f"{v:.6g}" for v in term.mean(axis=0)[:3]))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    _, sc, _, state = _restore(args.checkpoint, args.seed)
    report = evaluate(state.psi, sc, baseline=not args.no_baseline)
    if args.json:
        print(json.dumps(report.as_dict(), indent=2))
    else:
        print(format_report(report))
    return EXIT_OK


def cmd_export(args) -> int:
    _, sc, _, state = _restore(args.checkpoint, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _, x_test = sc.initial_samples()
    _, z_test = sc.target_split()
    traj = simulate(
        state.psi, sc.control, x_test, sc.diffusion, sc.h, sc.T, sc.seed, sc.control_kind, EVAL_ITERATION
    )
    export_trajectories(traj, out / "trajectories.csv")
    save_point_cloud(out / "target.csv", PointCloud(z_test))
    save_point_cloud(out / "terminal.csv", PointCloud(traj.terminal.value))
    if sc.dim > 3:
        # coordinate projections for plotting
        for k in (2, 3):
            save_point_cloud(out / f"target_proj{k}.csv", PointCloud(z_test[:, :k]))
            save_point_cloud(out / f"terminal_proj{k}.csv", PointCloud(traj.terminal.value[:, :k]))
        proj = np.stack([s.value[:, :3] for s in traj.states])
        _export_projected(traj, proj, out / "trajectories_proj3.csv")
    print(str(out))
    return EXIT_OK


def _export_projected(traj, proj, path) -> None:
    from .autodiff import Tensor
    from .dynamics import TrajectoryBatch

    projected = TrajectoryBatch([Tensor(p) for p in proj], traj.times, traj.noise[..., :3], [], traj.agent_ids)
    export_trajectories(projected, path)


def cmd_presets(args) -> int:
    if args.action == "list":
        for name in preset_names():
            print(name)
        return EXIT_OK
    if not args.name:
        raise UsageError("odc presets emit: a preset name is required")
    try:
        text = emit_preset(args.name)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "simulate": cmd_simulate,
    "evaluate": cmd_evaluate,
    "export": cmd_export,
    "presets": cmd_presets,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except (ConfigError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDiverged, NonFiniteError, CollisionError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
