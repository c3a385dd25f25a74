"""File formats: point-cloud CSV, trajectory CSV, metrics CSV and binary checkpoints."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from ..matching import PointCloud
from ..network import NetworkParams
from ..trainer import AdamState, Optimizer, TrainMetrics, TrainState

CHECKPOINT_MAGIC = "ODC-CHECKPOINT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


# ---------------------------------------------------------------------------
# point clouds


def save_point_cloud(path, cloud: PointCloud) -> None:
    pts = cloud.points
    d = pts.shape[1]
    header = [f"x{k}" for k in range(d)] + (["weight"] if cloud.weights is not None else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i, row in enumerate(pts):
            vals = [_fmt(v) for v in row]
            if cloud.weights is not None:
                vals.append(_fmt(cloud.weights[i]))
            w.writerow(vals)


def load_point_cloud(path, dim: int | None = None) -> PointCloud:
    """Read ``x0,...,x{d-1}[,weight]``. Weights summing to within 1% of one
    are renormalized; anything further off is rejected."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    has_weight = bool(header) and header[-1] == "weight"
    coords = header[:-1] if has_weight else header
    if coords != [f"x{k}" for k in range(len(coords))] or not coords:
        raise ValueError(f"{path}: header must be x0,...,x{{d-1}}[,weight], got {','.join(header)}")
    if dim is not None and len(coords) != dim:
        raise ValueError(f"{path}: {len(coords)} coordinate columns, expected {dim}")
    data = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        try:
            data.append([float(v) for v in row])
        except ValueError:
            raise ValueError(f"{path}:{lineno}: non-numeric field") from None
    if not data:
        raise ValueError(f"{path}: no points")
    arr = np.array(data)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{path}: non-finite values")
    if not has_weight:
        return PointCloud(arr)
    w = arr[:, -1]
    if np.any(w < 0):
        raise ValueError(f"{path}: negative weights")
    s = w.sum()
    if not 0.99 <= s <= 1.01:
        raise ValueError(f"{path}: weights sum to {s}, not within [0.99, 1.01]")
    return PointCloud(arr[:, :-1], w / s)


# ---------------------------------------------------------------------------
# trajectories


def export_trajectories(traj, path) -> None:
    """CSV ``t,agent_id,x0,...`` ordered by time then agent."""
    pos = traj.positions()
    ids = traj.agent_ids if traj.agent_ids is not None else np.arange(pos.shape[1])
    d = pos.shape[2]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["t", "agent_id"] + [f"x{k}" for k in range(d)])
        for k, t in enumerate(traj.times):
            for i in np.argsort(ids, kind="stable"):
                w.writerow([_fmt(t), int(ids[i])] + [_fmt(v) for v in pos[k, i]])


def load_trajectories(path) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (times, agent_ids, positions[steps, agents, d])."""
    arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    times = np.unique(arr[:, 0])
    ids = np.unique(arr[:, 1]).astype(int)
    pos = arr[:, 2:].reshape(len(times), len(ids), -1)
    return times, ids, pos


# ---------------------------------------------------------------------------
# metrics


def write_metrics(path, metrics: TrainMetrics, every: int = 1, append: bool = False, start: int = 0) -> None:
    mode = "a" if append else "w"
    with open(path, mode, newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if not append:
            w.writerow(TrainMetrics.COLUMNS)
        rows = metrics.rows()
        for k, row in enumerate(rows[start:], start=start):
            if row[0] % every == 0 or k == len(rows) - 1:
                w.writerow([row[0]] + [_fmt(v) for v in row[1:]])


class MetricsWriter:
    """Streams one CSV row per recorded outer iteration."""

    def __init__(self, path, every: int = 1, append: bool = False):
        self.every = max(1, int(every))
        new = not (append and Path(path).exists())
        self._fh = open(path, "w" if new else "a", newline="", encoding="utf-8")
        self._w = csv.writer(self._fh, lineterminator="\n")
        if new:
            self._w.writerow(TrainMetrics.COLUMNS)
        self._last = None

    def record(self, metrics: TrainMetrics, force: bool = False) -> None:
        if not len(metrics):
            return
        row = (
            metrics.iteration[-1],
            metrics.objective[-1],
            metrics.running_cost[-1],
            metrics.match_value[-1],
            metrics.grad_map_norm[-1],
            metrics.wall_ms[-1],
        )
        if row[0] == self._last:
            return
        if force or row[0] % self.every == 0:
            self._w.writerow([row[0]] + [_fmt(v) for v in row[1:]])
            self._last = row[0]

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def read_metrics(path) -> dict[str, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        rows = list(reader)
    return {c: np.array([float(r[c]) for r in rows]) for c in TrainMetrics.COLUMNS}


# ---------------------------------------------------------------------------
# checkpoints
#
# Text header lines terminated by "end\n", then the config YAML bytes, then
# every array as little-endian float64 in header order.


def _net_arrays(prefix: str, net: NetworkParams) -> list[tuple[str, np.ndarray]]:
    out = [(f"{prefix}.{k}", a) for k, a in enumerate(net.arrays())]
    if net.spectral_state is not None:
        out += [(f"{prefix}.sn.{k}", u) for k, u in enumerate(net.spectral_state)]
    return out


def _opt_arrays(prefix: str, opt: Optimizer) -> list[tuple[str, np.ndarray]]:
    if opt.state is None:
        return []
    st = opt.state
    out = [(f"{prefix}.t", np.array([float(st.t)]))]
    out += [(f"{prefix}.m.{k}", a) for k, a in enumerate(st.m)]
    out += [(f"{prefix}.v.{k}", a) for k, a in enumerate(st.v)]
    return out


def save_checkpoint(path, state: TrainState, config_text: str, scenario_hash: str, seed: int) -> None:
    arrays = (
        _net_arrays("psi", state.psi)
        + _net_arrays("phi", state.phi)
        + _opt_arrays("opt_theta", state.theta_opt)
        + _opt_arrays("opt_eta", state.eta_opt)
    )
    cfg = config_text.encode("utf-8")
    lines = [
        f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}",
        f"scenario_hash {scenario_hash}",
        f"seed {seed}",
        f"iteration {state.iteration}",
        f"stall {state.stall}",
        f"config_bytes {len(cfg)}",
        f"arrays {len(arrays)}",
    ]
    for name, a in arrays:
        lines.append(f"array {name} {','.join(map(str, a.shape)) or '-'}")
    lines.append("end")
    buf = io.BytesIO()
    buf.write(("\n".join(lines) + "\n").encode("ascii"))
    buf.write(cfg)
    for _, a in arrays:
        buf.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class Checkpoint:
    def __init__(self, meta: dict, config_text: str, arrays: dict[str, np.ndarray]):
        self.meta = meta
        self.config_text = config_text
        self.arrays = arrays

    @property
    def iteration(self) -> int:
        return int(self.meta["iteration"])

    @property
    def seed(self) -> int:
        return int(self.meta["seed"])

    def _net(self, prefix: str, template: NetworkParams) -> NetworkParams:
        arrays = []
        for k, a in enumerate(template.arrays()):
            got = self.arrays.get(f"{prefix}.{k}")
            if got is None or got.shape != a.shape:
                raise CheckpointError(
                    f"{prefix}.{k}: shape {None if got is None else got.shape} does not match {a.shape}"
                )
            arrays.append(got)
        net = template.with_arrays(arrays)
        sn = [self.arrays[f"{prefix}.sn.{k}"] for k in range(len(net.weights)) if f"{prefix}.sn.{k}" in self.arrays]
        net.spectral_state = sn if len(sn) == len(net.weights) else None
        return net

    def _opt(self, prefix: str, template: Optimizer, params: NetworkParams) -> Optimizer:
        opt = Optimizer(template.kind, template.lr, template.beta1, template.beta2, template.eps)
        if f"{prefix}.t" in self.arrays:
            n = len(params.arrays())
            m = [self.arrays[f"{prefix}.m.{k}"] for k in range(n)]
            v = [self.arrays[f"{prefix}.v.{k}"] for k in range(n)]
            opt.state = AdamState(m, v, int(self.arrays[f"{prefix}.t"][0]))
        return opt

    def restore(self, template: TrainState) -> TrainState:
        psi = self._net("psi", template.psi)
        phi = self._net("phi", template.phi)
        return TrainState(
            psi,
            phi,
            self._opt("opt_theta", template.theta_opt, psi),
            self._opt("opt_eta", template.eta_opt, phi),
            self.iteration,
            int(self.meta.get("stall", 0)),
        )


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    end = data.find(b"\nend\n")
    if end < 0:
        raise CheckpointError(f"{path}: missing header terminator")
    try:
        header = data[: end + 1].decode("ascii").splitlines()
    except UnicodeDecodeError:
        raise CheckpointError(f"{path}: corrupt header") from None
    body = memoryview(data)[end + 5 :]
    first = header[0].split() if header else []
    if len(first) != 2 or first[0] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if first[1] != str(CHECKPOINT_VERSION):
        raise CheckpointError(f"{path}: format version {first[1]}, expected {CHECKPOINT_VERSION}")
    meta: dict = {}
    specs = []
    try:
        for line in header[1:]:
            parts = line.split()
            if parts[0] == "array":
                shape = () if parts[2] == "-" else tuple(int(s) for s in parts[2].split(","))
                specs.append((parts[1], shape))
            else:
                meta[parts[0]] = parts[1]
        n_cfg = int(meta["config_bytes"])
        if int(meta["arrays"]) != len(specs):
            raise ValueError("array count mismatch")
    except (IndexError, KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    need = n_cfg + sum(8 * int(np.prod(s)) for _, s in specs)
    if len(body) != need:
        raise CheckpointError(f"{path}: truncated or oversized body ({len(body)} bytes, expected {need})")
    config_text = bytes(body[:n_cfg]).decode("utf-8")
    arrays = {}
    off = n_cfg
    for name, shape in specs:
        k = int(np.prod(shape))
        arrays[name] = np.frombuffer(body[off : off + 8 * k], dtype="<f8").astype(np.float64).reshape(shape)
        off += 8 * k
    return Checkpoint(meta, config_text, arrays)
