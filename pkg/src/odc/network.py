"""Small feed-forward networks used for the control potential and the dual critic."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor

ACTIVATIONS = {"tanh": ad.tanh, "repu": ad.repu}


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden_layers: int
    hidden_width: int
    output_dim: int
    activation: str = "tanh"
    residual: bool = False

    def __post_init__(self):
        for name in ("input_dim", "hidden_layers", "hidden_width", "output_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) of every affine layer, input to output."""
        d, w, o = self.input_dim, self.hidden_width, self.output_dim
        if not self.residual:
            dims = [d] + [w] * self.hidden_layers + [o]
            return list(zip(dims[:-1], dims[1:]))
        shapes = []
        if w != d:
            shapes.append((d, w))
        shapes += [(w, w)] * self.hidden_layers
        if w != o:
            shapes.append((w, o))
        return shapes

    def roles(self) -> list[str]:
        """Role of each affine layer: 'hidden', 'block', 'proj' or 'out'."""
        if not self.residual:
            return ["hidden"] * self.hidden_layers + ["out"]
        roles = []
        if self.hidden_width != self.input_dim:
            roles.append("proj")
        roles += ["block"] * self.hidden_layers
        if self.hidden_width != self.output_dim:
            roles.append("proj")
        return roles


@dataclass
class NetworkParams:
    """Weights are stored (fan_in, fan_out) so a batch maps as ``x @ W + b``."""

    weights: list[np.ndarray]
    biases: list[np.ndarray]
    spectral_state: list[np.ndarray] | None = None

    def copy(self) -> "NetworkParams":
        state = None if self.spectral_state is None else [u.copy() for u in self.spectral_state]
        return NetworkParams(
            [w.copy() for w in self.weights], [b.copy() for b in self.biases], state
        )

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def with_arrays(self, arrays) -> "NetworkParams":
        arrays = list(arrays)
        return NetworkParams(
            [np.array(a, dtype=np.float64) for a in arrays[0::2]],
            [np.array(a, dtype=np.float64) for a in arrays[1::2]],
            None if self.spectral_state is None else [u.copy() for u in self.spectral_state],
        )

    def flat(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_flat(self, vec: np.ndarray) -> "NetworkParams":
        arrays, k = [], 0
        for a in self.arrays():
            arrays.append(np.asarray(vec[k : k + a.size]).reshape(a.shape))
            k += a.size
        return self.with_arrays(arrays)

    @property
    def size(self) -> int:
        return sum(a.size for a in self.arrays())

    def on_tape(self, tape: Tape, trainable: bool = True) -> list[Tensor]:
        if trainable:
            return [tape.variable(a) for a in self.arrays()]
        return [tape.constant(a) for a in self.arrays()]


def xavier_initialize(spec: MLPSpec, seed) -> NetworkParams:
    """Normal Xavier weights with variance 2/(fan_in+fan_out), zero biases."""
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in spec.layer_shapes():
        std = np.sqrt(2.0 / (fan_in + fan_out))
        weights.append(rng.normal(0.0, std, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases)


def mlp_forward(params, spec: MLPSpec, x) -> Tensor:
    """Batched forward pass.

    ``params`` is either a :class:`NetworkParams` (evaluated as constants) or
    the flat list ``[W0, b0, W1, b1, ...]`` of tensors from
    :meth:`NetworkParams.on_tape`.
    """
    if isinstance(params, NetworkParams):
        tape = x.tape if isinstance(x, Tensor) else None
        arrays = params.arrays()
        params = arrays if tape is None else [tape.constant(a) for a in arrays]
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise ValueError(f"expected batch of width {spec.input_dim}, got shape {x.shape}")
    act = ACTIVATIONS[spec.activation]
    ws, bs = params[0::2], params[1::2]
    if len(ws) != len(spec.layer_shapes()):
        raise ValueError("parameter list does not match the spec")
    h = x
    for w, b, role in zip(ws, bs, spec.roles()):
        z = ad.matmul(h, w) + b
        if role == "hidden":
            h = act(z)
        elif role == "block":
            h = h + act(z)
        else:
            h = z
    return h


def _power_step(w: np.ndarray, u: np.ndarray) -> tuple[np.ndarray, np.ndarray, float]:
    # w is (fan_in, fan_out); operator is x -> x @ w, left vector lives in fan_out
    v = w @ u
    nv = np.linalg.norm(v)
    if nv == 0.0:
        return u, v, 0.0
    v /= nv
    wv = v @ w
    sigma = float(np.linalg.norm(wv))
    if sigma == 0.0:
        return u, v, 0.0
    return wv / sigma, v, sigma


def spectral_norm_estimate(w: np.ndarray, u: np.ndarray, iters: int) -> tuple[float, np.ndarray]:
    """Warm-started power iteration; returns (sigma estimate, updated left vector)."""
    sigma = 0.0
    for _ in range(iters):
        u, _, sigma = _power_step(w, u)
    return sigma, u


def spectral_normalize(params: NetworkParams, power_iters: int = 1, seed=0) -> NetworkParams:
    """Divide every weight matrix by its estimated largest singular value."""
    if power_iters < 1:
        raise ValueError("power_iters must be >= 1")
    out = params.copy()
    if out.spectral_state is None:
        rng = np.random.default_rng(seed)
        out.spectral_state = []
        for w in out.weights:
            u = rng.normal(size=w.shape[1])
            out.spectral_state.append(u / np.linalg.norm(u))
    for k, w in enumerate(out.weights):
        if not np.any(w):
            continue
        sigma, u = spectral_norm_estimate(w, out.spectral_state[k], power_iters)
        out.spectral_state[k] = u
        if sigma > 0.0:
            out.weights[k] = w / sigma
    return out


def converge_spectral_state(params: NetworkParams, seed=0, tol: float = 1e-12, max_iters: int = 5000) -> NetworkParams:
    """Run each layer's power iteration until the estimate settles, without
    rescaling. Gives a fresh network the warm state a long training run
    would otherwise build up one step at a time."""
    out = params.copy()
    rng = np.random.default_rng(seed)
    state = []
    for k, w in enumerate(out.weights):
        if out.spectral_state is not None:
            u = out.spectral_state[k]
        else:
            u = rng.normal(size=w.shape[1])
            u /= np.linalg.norm(u)
        prev = 0.0
        for _ in range(max_iters):
            u, _, sigma = _power_step(w, u)
            if sigma == 0.0 or abs(sigma - prev) <= tol * sigma:
                break
            prev = sigma
        state.append(u)
    out.spectral_state = state
    return out


def potential_sum(params, spec: MLPSpec, x: Tensor) -> Tensor:
    if spec.output_dim != 1:
        raise ValueError("potential network must have output_dim 1")
    return ad.tsum(mlp_forward(params, spec, x))


def control_from_potential(params, spec: MLPSpec, x) -> Tensor:
    """Gradient-field control u(x) = grad_x psi(x), row-wise.

    Batch rows are independent, so the input gradient of sum(psi) gives each
    row's gradient. The result stays differentiable w.r.t. ``params`` when
    they are tape variables.
    """
    if spec.output_dim != 1:
        raise ValueError("potential network must have output_dim 1")
    if isinstance(x, Tensor) and x.tape is not None:
        tape = x.tape
    else:
        tape = Tape()
        if isinstance(params, NetworkParams):
            params = params.on_tape(tape, trainable=False)
        x = tape.variable(x.value if isinstance(x, Tensor) else x)
        psi = potential_sum(params, spec, x)
        return Tensor(ad.reverse_gradient(psi, x)[0].value)
    psi = potential_sum(params, spec, x)
    return ad.input_gradient_node(psi, x)


def direct_control(params, spec: MLPSpec, x) -> Tensor:
    if spec.output_dim != spec.input_dim:
        raise ValueError("direct control needs output_dim == input_dim")
    return mlp_forward(params, spec, x)


def lipschitz_bound(params: NetworkParams) -> float:
    """Product of exact layer operator norms (activations are 1-Lipschitz)."""
    return float(np.prod([np.linalg.norm(w, 2) for w in params.weights]))
