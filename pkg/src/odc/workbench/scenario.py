"""Scenario configuration: a YAML key-value tree describing one density-control problem."""

from __future__ import annotations

import copy
import hashlib
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from ..costs import CostSpec, InteractionSpec
from ..dynamics import DiffusionSpec, num_steps
from ..matching import PointCloud
from ..network import MLPSpec
from ..trainer import Problem, TrainConfig
from .flows import make_flow

SAMPLE_STREAM = 0x5A3


class ConfigError(ValueError):
    """Invalid scenario configuration; ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        self.line = line
        self.path = path
        where = f"{path or '<config>'}:{line}: " if line else f"{path or '<config>'}: "
        super().__init__(where + message)


# ---------------------------------------------------------------------------
# gaussian mixtures


@dataclass
class GaussianMixtureSpec:
    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray  # (k, d, d)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        k, d = self.means.shape
        covs = np.asarray(self.covs, dtype=np.float64)
        if covs.ndim == 2:  # per-component diagonals
            covs = np.stack([np.diag(c) for c in covs])
        self.covs = covs
        if self.weights.shape != (k,) or np.any(self.weights <= 0):
            raise ValueError("mixture weights must be positive, one per component")
        if abs(self.weights.sum() - 1.0) > 1e-6:
            raise ValueError(f"mixture weights sum to {self.weights.sum()}, expected 1")
        if self.covs.shape != (k, d, d):
            raise ValueError(f"covariances must have shape {(k, d, d)}")
        for c in self.covs:
            if not np.allclose(c, c.T) or np.linalg.eigvalsh(c).min() < -1e-12:
                raise ValueError("covariance is not symmetric positive semidefinite")

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @classmethod
    def single(cls, mean, cov) -> "GaussianMixtureSpec":
        mean = np.asarray(mean, dtype=np.float64)
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = np.eye(len(mean)) * cov
        elif cov.ndim == 1:
            cov = np.diag(cov)
        return cls(np.ones(1), mean[None], cov[None])


def sample_mixture(spec: GaussianMixtureSpec, n: int, seed) -> PointCloud:
    rng = np.random.default_rng(seed)
    comp = rng.choice(len(spec.weights), size=n, p=spec.weights)
    eps = rng.standard_normal((n, spec.dim))
    out = np.empty((n, spec.dim))
    for k in range(len(spec.weights)):
        mask = comp == k
        vals, vecs = np.linalg.eigh(spec.covs[k])
        root = vecs * np.sqrt(np.clip(vals, 0.0, None))
        out[mask] = spec.means[k] + eps[mask] @ root.T
    return PointCloud(out)


# ---------------------------------------------------------------------------
# yaml with line tracking


def _compose(text: str, path: str | None):
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"malformed config: {getattr(exc, 'problem', exc)}", line, path) from None
    if node is None:
        raise ConfigError("empty config", 1, path)
    lines: dict[tuple, int] = {}

    def walk(n, key):
        lines[key] = n.start_mark.line + 1
        if isinstance(n, yaml.MappingNode):
            for k, v in n.value:
                walk(v, key + (k.value,))
        elif isinstance(n, yaml.SequenceNode):
            for i, v in enumerate(n.value):
                walk(v, key + (i,))

    walk(node, ())
    data = yaml.load(text, Loader=yaml.SafeLoader)
    if not isinstance(data, dict):
        raise ConfigError("top level must be a mapping", 1, path)
    return data, lines


class _Reader:
    """Typed access to the config tree that reports the offending line."""

    def __init__(self, data, lines, path):
        self.data, self.lines, self.path = data, lines, path

    def fail(self, key, msg):
        line = None
        for k in range(len(key), -1, -1):
            if key[:k] in self.lines:
                line = self.lines[key[:k]]
                break
        raise ConfigError(f"{'.'.join(map(str, key)) or 'config'}: {msg}", line, self.path)

    def get(self, key, default=..., kind=None):
        node = self.data
        for k in key:
            if isinstance(node, dict) and k in node:
                node = node[k]
            elif isinstance(node, list) and isinstance(k, int) and k < len(node):
                node = node[k]
            else:
                if default is ...:
                    self.fail(key, "missing required value")
                return default
        if kind is None:
            return node
        try:
            if kind is int and (isinstance(node, bool) or float(node) != int(node)):
                raise ValueError
            if kind is float and isinstance(node, str) and node.strip().lower() in ("inf", "+inf"):
                return math.inf
            return kind(node)
        except (TypeError, ValueError):
            self.fail(key, f"expected {kind.__name__}, got {node!r}")

    def array(self, key, default=...):
        val = self.get(key, default)
        try:
            return np.asarray(val, dtype=np.float64)
        except (TypeError, ValueError):
            self.fail(key, f"expected numbers, got {val!r}")

    def check_keys(self, key, allowed):
        node = self.get(key, {})
        if not isinstance(node, dict):
            self.fail(key, "expected a mapping")
        for k in node:
            if k not in allowed:
                self.fail(key + (k,), f"unknown key (allowed: {', '.join(sorted(allowed))})")


# ---------------------------------------------------------------------------
# scenario


@dataclass
class DistributionSpec:
    mixture: GaussianMixtureSpec | None = None
    points: np.ndarray | None = None

    @property
    def fixed(self) -> bool:
        return self.points is not None


@dataclass
class ScenarioConfig:
    name: str
    dim: int
    initial: DistributionSpec
    target: DistributionSpec
    cost: CostSpec
    diffusion: DiffusionSpec
    h: float
    T: float
    N: int
    train_fraction: float
    test_fraction: float
    control: MLPSpec
    control_kind: str
    critic: MLPSpec
    train: TrainConfig
    seed: int
    target_samples: int
    raw: dict = field(default_factory=dict, repr=False)

    @property
    def n_train(self) -> int:
        return int(round(self.N * self.train_fraction))

    @property
    def steps(self) -> int:
        return num_steps(self.h, self.T)

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=False, default_flow_style=None)

    def scenario_hash(self) -> str:
        return hashlib.sha256(self.to_yaml().encode("utf-8")).hexdigest()

    def with_overrides(self, **train_overrides) -> "ScenarioConfig":
        raw = copy.deepcopy(self.raw)
        for k, v in train_overrides.items():
            if k in ("seed", "name", "N", "T", "h"):
                raw[k] = v
            else:
                raw.setdefault("train", {})[k] = v
        return parse_scenario(raw)

    # -- sampling -----------------------------------------------------------

    def _cloud(self, dist: DistributionSpec, n: int, tag: int) -> np.ndarray:
        if dist.fixed:
            return dist.points.copy()
        return sample_mixture(dist.mixture, n, [self.seed, SAMPLE_STREAM, tag]).points

    def initial_samples(self) -> tuple[np.ndarray, np.ndarray]:
        """(train, test) initial states; a fixed point set serves as both."""
        x = self._cloud(self.initial, self.N, 0)
        if self.initial.fixed:
            return x, x.copy()
        k = self.n_train
        return x[:k], x[k:]

    def target_split(self) -> tuple[np.ndarray, np.ndarray]:
        z = self._cloud(self.target, self.target_samples, 1)
        if self.target.fixed:
            return z, z.copy()
        k = int(round(len(z) * self.train_fraction))
        return z[:k], z[k:]

    def problem(self) -> Problem:
        x_train, _ = self.initial_samples()
        z_train, _ = self.target_split()
        return Problem(
            x_train,
            z_train,
            self.cost,
            self.diffusion,
            self.h,
            self.T,
            self.control,
            self.critic,
            self.train,
            self.seed,
            self.control_kind,
        )


_TOP = {
    "name", "dim", "seed", "h", "T", "N", "target_samples", "split",
    "initial", "target", "cost", "diffusion", "control", "critic", "train",
}
_TRAIN_KEYS = set(TrainConfig.__dataclass_fields__)


def _dist(r: _Reader, key, dim, base_dir) -> DistributionSpec:
    r.check_keys(key, {"mixture", "points", "file"})
    node = r.get(key)
    if sum(k in node for k in ("mixture", "points", "file")) != 1:
        r.fail(key, "give exactly one of mixture, points, file")
    if "file" in node:
        from .io import load_point_cloud

        p = Path(str(node["file"]))
        if not p.is_absolute() and base_dir is not None:
            p = Path(base_dir) / p
        try:
            cloud = load_point_cloud(p, dim)
        except (OSError, ValueError) as exc:
            r.fail(key + ("file",), str(exc))
        node["file"] = str(p.resolve())
        return DistributionSpec(points=cloud.points)
    if "points" in node:
        try:
            pts = np.asarray(node["points"], dtype=np.float64)
        except (TypeError, ValueError):
            r.fail(key + ("points",), "points must be a list of numeric rows")
        if pts.ndim != 2 or pts.shape[1] != dim or len(pts) < 1:
            r.fail(key + ("points",), f"expected rows of length {dim}")
        return DistributionSpec(points=pts)
    comps = node["mixture"]
    if not isinstance(comps, list) or not comps:
        r.fail(key + ("mixture",), "expected a non-empty list of components")
    weights, means, covs = [], [], []
    for i, _ in enumerate(comps):
        ck = key + ("mixture", i)
        r.check_keys(ck, {"weight", "mean", "cov", "std"})
        weights.append(r.get(ck + ("weight",), 1.0 / len(comps), float))
        mean = r.array(ck + ("mean",))
        if mean.ndim == 0:
            mean = np.full(dim, float(mean))
        if mean.shape != (dim,):
            r.fail(ck + ("mean",), f"expected {dim} entries")
        if "std" in comps[i]:
            std = r.array(ck + ("std",))
            cov = np.diag(np.broadcast_to(std**2, (dim,)).copy())
        else:
            c = r.array(ck + ("cov",), 0.0)
            cov = np.diag(np.broadcast_to(c, (dim,)).copy()) if c.ndim < 2 else c
        if cov.shape != (dim, dim):
            r.fail(ck, f"covariance must be scalar, length-{dim} diagonal or {dim}x{dim}")
        means.append(mean)
        covs.append(cov)
    try:
        mix = GaussianMixtureSpec(np.array(weights), np.array(means), np.array(covs))
    except ValueError as exc:
        r.fail(key + ("mixture",), str(exc))
    return DistributionSpec(mixture=mix)


def _mlp(r: _Reader, key, dim, out, defaults) -> MLPSpec:
    r.check_keys(key, {"kind", "hidden_layers", "hidden_width", "activation", "residual"})
    try:
        return MLPSpec(
            dim,
            r.get(key + ("hidden_layers",), defaults[0], int),
            r.get(key + ("hidden_width",), defaults[1], int),
            out,
            r.get(key + ("activation",), "tanh", str),
            r.get(key + ("residual",), False, bool),
        )
    except ValueError as exc:
        r.fail(key, str(exc))


def parse_scenario(data: dict, lines: dict | None = None, path: str | None = None, base_dir=None) -> ScenarioConfig:
    data = copy.deepcopy(data)
    r = _Reader(data, lines or {}, path)
    r.check_keys((), _TOP)
    dim = r.get(("dim",), kind=int)
    if dim < 1:
        r.fail(("dim",), "must be >= 1")
    seed = r.get(("seed",), 0, int)
    if os.environ.get("ODC_SEED"):
        seed = int(os.environ["ODC_SEED"])
        data["seed"] = seed
    h = r.get(("h",), kind=float)
    T = r.get(("T",), kind=float)
    if not (0 < T < math.inf):
        r.fail(("T",), "require a finite T > 0")
    if not (0 < h <= T):
        r.fail(("h",), "require 0 < h <= T")
    N = r.get(("N",), kind=int)
    if N < 2:
        r.fail(("N",), "must be >= 2")
    r.check_keys(("split",), {"train", "test"})
    tr = r.get(("split", "train"), 0.75, float)
    te = r.get(("split", "test"), 1.0 - tr, float)
    if tr <= 0 or te < 0 or abs(tr + te - 1.0) > 1e-9:
        r.fail(("split",), "fractions must be non-negative and sum to 1")

    initial = _dist(r, ("initial",), dim, base_dir)
    target = _dist(r, ("target",), dim, base_dir)

    r.check_keys(("cost",), {"base", "flow", "interaction"})
    base = r.get(("cost", "base"), "quadratic_energy", str)
    flow = None
    if base == "flow_deviation":
        if dim != 2:
            r.fail(("cost", "base"), "flow fields are two-dimensional")
        flow_node = r.get(("cost", "flow"))
        if isinstance(flow_node, dict) and "file" in flow_node:
            fp = Path(str(flow_node["file"]))
            if not fp.is_absolute() and base_dir is not None:
                fp = Path(base_dir) / fp
            flow_node["file"] = str(fp.resolve())
        try:
            flow = make_flow(flow_node)
        except (OSError, ValueError, TypeError) as exc:
            r.fail(("cost", "flow"), str(exc))
    interaction = None
    if r.get(("cost", "interaction"), None) is not None:
        ik = ("cost", "interaction")
        r.check_keys(ik, {"kernel", "c", "alpha", "weight", "subsample"})
        try:
            interaction = InteractionSpec(
                r.get(ik + ("kernel",), "inverse_power", str),
                r.get(ik + ("c",), 1.0, float),
                r.get(ik + ("alpha",), 2.0, float),
                r.get(ik + ("weight",), 1.0, float),
                r.get(ik + ("subsample",), 256, int),
            )
        except ValueError as exc:
            r.fail(ik, str(exc))
    try:
        cost = CostSpec(base, flow, interaction)
    except ValueError as exc:
        r.fail(("cost",), str(exc))

    r.check_keys(("diffusion",), {"kind", "sigma"})
    kind = r.get(("diffusion", "kind"), "isotropic", str)
    sigma = r.get(("diffusion", "sigma"), 0.0, float)
    if kind not in ("zero", "isotropic"):
        r.fail(("diffusion", "kind"), "expected zero or isotropic")
    if sigma < 0:
        r.fail(("diffusion", "sigma"), "must be non-negative")
    diffusion = DiffusionSpec("zero") if kind == "zero" else DiffusionSpec.isotropic(sigma)

    control_kind = r.get(("control", "kind"), "gradient", str)
    if control_kind not in ("gradient", "direct"):
        r.fail(("control", "kind"), "expected gradient or direct")
    control = _mlp(r, ("control",), dim, 1 if control_kind == "gradient" else dim, (3, 36))
    critic = _mlp(r, ("critic",), dim, 1, (6, 256))

    r.check_keys(("train",), _TRAIN_KEYS)
    tnode = r.get(("train",), {})
    kwargs = {}
    for name, f in TrainConfig.__dataclass_fields__.items():
        if name in tnode:
            kind_ = {"int": int, "float": float, "str": str}.get(str(f.type).split(" ")[0], None)
            if name in ("inner_learning_rate", "early_stop_tol"):
                kind_ = float if tnode[name] is not None else None
            if name == "inner_optimizer":
                kind_ = str if tnode[name] is not None else None
            if name == "target_batch_size":
                kind_ = int if tnode[name] is not None else None
            kwargs[name] = r.get(("train", name), kind=kind_)
    try:
        train = TrainConfig(**kwargs)
    except (TypeError, ValueError) as exc:
        r.fail(("train",), str(exc))

    target_samples = r.get(("target_samples",), N, int)
    return ScenarioConfig(
        name=r.get(("name",), "scenario", str),
        dim=dim,
        initial=initial,
        target=target,
        cost=cost,
        diffusion=diffusion,
        h=h,
        T=T,
        N=N,
        train_fraction=tr,
        test_fraction=te,
        control=control,
        control_kind=control_kind,
        critic=critic,
        train=train,
        seed=seed,
        target_samples=target_samples,
        raw=data,
    )


def load_scenario_text(text: str, path: str | None = None, base_dir=None) -> ScenarioConfig:
    data, lines = _compose(text, path)
    return parse_scenario(data, lines, path, base_dir)


def load_scenario(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}", None, str(path)) from None
    return load_scenario_text(text, str(path), path.parent)
