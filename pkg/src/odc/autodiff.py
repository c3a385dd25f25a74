"""Reverse-mode automatic differentiation over dense numpy arrays.

Every primitive executed on a :class:`Tape` appends a node holding the op
kind, the ids of its inputs, the forward value and any static attributes.
Backward rules are written in terms of the same primitives, so running
:func:`reverse_gradient` with ``create_graph=True`` records the backward pass
onto the tape and the result can be differentiated again (double backward).

Tensors that are not attached to a tape carry a value only; ops on them are
plain numpy evaluations with the same finiteness checks.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class TapeError(RuntimeError):
    pass


class Node:
    __slots__ = ("op", "inputs", "value", "attrs", "requires_grad")

    def __init__(self, op, inputs, value, attrs, requires_grad):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.attrs = attrs
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Node({self.op}, inputs={self.inputs}, shape={self.value.shape})"


class Tape:
    """Ordered record of primitive evaluations.

    Node inputs always reference earlier node ids, so the node list is a
    topological order by construction.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self.input_ids: list[int] = []
        self.output_ids: list[int] = []

    def __len__(self):
        return len(self.nodes)

    def _append(self, op, inputs, value, attrs, requires_grad) -> "Tensor":
        nid = len(self.nodes)
        self.nodes.append(Node(op, inputs, value, attrs, requires_grad))
        return Tensor(value, self, nid)

    def variable(self, value, requires_grad: bool = True) -> "Tensor":
        """Declare an input of the recorded computation."""
        value = np.array(value, dtype=np.float64)
        _check_finite(value, "input", len(self.nodes))
        t = self._append("input", (), value, None, requires_grad)
        self.input_ids.append(t.id)
        return t

    def constant(self, value) -> "Tensor":
        value = np.asarray(value, dtype=np.float64)
        _check_finite(value, "const", len(self.nodes))
        return self._append("const", (), value, None, False)

    def mark_output(self, *tensors: "Tensor") -> None:
        for t in tensors:
            self.output_ids.append(t.id)

    def tensor(self, nid: int) -> "Tensor":
        return Tensor(self.nodes[nid].value, self, nid)


class Tensor:
    """Handle to a value, optionally tracked on a tape."""

    __slots__ = ("value", "tape", "id")
    __array_priority__ = 100.0

    def __init__(self, value, tape: Tape | None = None, nid: int | None = None):
        self.value = value
        self.tape = tape
        self.id = nid

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None and self.tape.nodes[self.id].requires_grad

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def detach(self) -> "Tensor":
        return Tensor(self.value)

    def __repr__(self):
        where = f"node {self.id}" if self.tape is not None else "untracked"
        return f"Tensor(shape={self.shape}, {where})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __pow__(self, p):
        return power(self, p)

    def __getitem__(self, idx):
        if isinstance(idx, tuple) and len(idx) == 2 and idx[0] == slice(None):
            return take(self, np.arange(self.shape[1])[idx[1]], axis=1)
        return take(self, np.arange(self.shape[0])[idx], axis=0)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _check_finite(value: np.ndarray, op: str, nid) -> None:
    if not np.all(np.isfinite(value)):
        where = f"node {nid}" if nid is not None else "untracked op"
        raise NonFiniteError(f"non-finite value produced by '{op}' at {where}")


# ---------------------------------------------------------------------------
# primitive registry

FORWARD: dict[str, Callable] = {}
BACKWARD: dict[str, Callable] = {}
FIRST_ORDER_ONLY: set[str] = set()


def _sum_to_shape(x: np.ndarray, shape) -> np.ndarray:
    shape = tuple(shape)
    if x.shape == shape:
        return x
    lead = x.ndim - len(shape)
    axes = tuple(range(lead)) + tuple(
        i + lead for i, s in enumerate(shape) if s == 1 and x.shape[i + lead] != 1
    )
    out = x.sum(axis=axes, keepdims=True)
    return out.reshape(shape)


def _np_sum(v, attrs):
    return np.sum(v[0], axis=attrs["axis"], keepdims=attrs["keepdims"])


def _np_take(v, attrs):
    return np.take(v[0], attrs["index"], axis=attrs["axis"])


def _np_scatter_add(v, attrs):
    axis, n = attrs["axis"], attrs["size"]
    g = v[0]
    shape = list(g.shape)
    shape[axis] = n
    out = np.zeros(shape)
    if axis == 0:
        np.add.at(out, attrs["index"], g)
    else:
        np.add.at(out, (slice(None), attrs["index"]), g)
    return out


def _np_relu(v, attrs):
    return np.maximum(v[0], 0.0)


def _np_repu(v, attrs):
    r = np.maximum(v[0], 0.0)
    return r * r


def _np_step(v, attrs):
    return (v[0] > 0.0).astype(np.float64)


FORWARD.update(
    {
        "add": lambda v, a: v[0] + v[1],
        "sub": lambda v, a: v[0] - v[1],
        "mul": lambda v, a: v[0] * v[1],
        "div": lambda v, a: v[0] / v[1],
        "neg": lambda v, a: -v[0],
        "matmul": lambda v, a: v[0] @ v[1],
        "transpose": lambda v, a: v[0].T,
        "reshape": lambda v, a: v[0].reshape(a["shape"]),
        "broadcast_to": lambda v, a: np.broadcast_to(v[0], a["shape"]).copy(),
        "sum_to": lambda v, a: _sum_to_shape(v[0], a["shape"]),
        "sum": _np_sum,
        "tanh": lambda v, a: np.tanh(v[0]),
        "relu": _np_relu,
        "repu": _np_repu,
        "step": _np_step,
        "exp": lambda v, a: np.exp(v[0]),
        "log": lambda v, a: np.log(v[0]),
        "sin": lambda v, a: np.sin(v[0]),
        "cos": lambda v, a: np.cos(v[0]),
        "pow": lambda v, a: np.power(v[0], a["p"]),
        "take": _np_take,
        "scatter_add": _np_scatter_add,
    }
)


def _tape_of(args) -> Tape | None:
    tape = None
    for a in args:
        if isinstance(a, Tensor) and a.tape is not None:
            if tape is None:
                tape = a.tape
            elif a.tape is not tape:
                raise TapeError("operands live on different tapes")
    return tape


def _lift(x, tape: Tape | None) -> Tensor:
    if isinstance(x, Tensor):
        if x.tape is None and tape is not None:
            return tape.constant(x.value)
        return x
    value = np.asarray(x, dtype=np.float64)
    if tape is not None:
        return tape.constant(value)
    return Tensor(value)


def _apply(op: str, args: Sequence, attrs=None) -> Tensor:
    tape = _tape_of(args)
    ts = [_lift(a, tape) for a in args]
    with np.errstate(all="ignore"):  # non-finite results are reported below
        value = FORWARD[op]([t.value for t in ts], attrs)
    if tape is None:
        _check_finite(value, op, None)
        return Tensor(value)
    _check_finite(value, op, len(tape.nodes))
    rg = any(tape.nodes[t.id].requires_grad for t in ts)
    return tape._append(op, tuple(t.id for t in ts), value, attrs, rg)


def register_op(name: str, forward: Callable, backward: Callable, first_order_only=False):
    """Add a primitive. ``backward(g, inputs, out, attrs, need)`` returns
    one cotangent (Tensor or None) per input."""
    FORWARD[name] = forward
    BACKWARD[name] = backward
    if first_order_only:
        FIRST_ORDER_ONLY.add(name)


def apply_op(name: str, *args, **attrs) -> Tensor:
    return _apply(name, args, attrs or None)


# ---------------------------------------------------------------------------
# public primitives


def add(a, b):
    return _apply("add", (a, b))


def sub(a, b):
    return _apply("sub", (a, b))


def mul(a, b):
    return _apply("mul", (a, b))


def div(a, b):
    return _apply("div", (a, b))


def neg(a):
    return _apply("neg", (a,))


def matmul(a, b):
    return _apply("matmul", (a, b))


def transpose(a):
    return _apply("transpose", (a,))


def reshape(a, shape):
    return _apply("reshape", (a,), {"shape": tuple(shape)})


def broadcast_to(a, shape):
    return _apply("broadcast_to", (a,), {"shape": tuple(shape)})


def sum_to(a, shape):
    return _apply("sum_to", (a,), {"shape": tuple(shape)})


def tsum(a, axis=None, keepdims=False):
    if isinstance(axis, list):
        axis = tuple(axis)
    return _apply("sum", (a,), {"axis": axis, "keepdims": keepdims})


def mean(a, axis=None, keepdims=False):
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=np.float64))
    if axis is None:
        n = a.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([a.shape[i] for i in axes]))
    return tsum(a, axis, keepdims) * (1.0 / n)


def tanh(a):
    return _apply("tanh", (a,))


def relu(a):
    return _apply("relu", (a,))


def repu(a):
    """Rectified power unit max(0, x)**2."""
    return _apply("repu", (a,))


def exp(a):
    return _apply("exp", (a,))


def log(a):
    return _apply("log", (a,))


def sin(a):
    return _apply("sin", (a,))


def cos(a):
    return _apply("cos", (a,))


def power(a, p: float):
    return _apply("pow", (a,), {"p": float(p)})


def sqnorm(a, axis=None, keepdims=False):
    """Squared Euclidean norm along ``axis`` (all entries if None)."""
    return tsum(a * a, axis, keepdims)


def take(a, index, axis: int = 0):
    index = np.asarray(index, dtype=np.intp)
    return _apply("take", (a,), {"index": index, "axis": axis})


def scatter_add(a, index, size: int, axis: int = 0):
    index = np.asarray(index, dtype=np.intp)
    return _apply("scatter_add", (a,), {"index": index, "axis": axis, "size": size})


def _step(a):
    # derivative mask of relu; carries no gradient
    return _apply("step", (a,))


# ---------------------------------------------------------------------------
# backward rules; g is the output cotangent, xs the input handles


def _bw_add(g, xs, out, attrs, need):
    return [
        sum_to(g, xs[0].shape) if need[0] else None,
        sum_to(g, xs[1].shape) if need[1] else None,
    ]


def _bw_sub(g, xs, out, attrs, need):
    return [
        sum_to(g, xs[0].shape) if need[0] else None,
        sum_to(neg(g), xs[1].shape) if need[1] else None,
    ]


def _bw_mul(g, xs, out, attrs, need):
    a, b = xs
    return [
        sum_to(g * b, a.shape) if need[0] else None,
        sum_to(g * a, b.shape) if need[1] else None,
    ]


def _bw_div(g, xs, out, attrs, need):
    a, b = xs
    ga = sum_to(g / b, a.shape) if need[0] else None
    gb = sum_to(neg(g * out / b), b.shape) if need[1] else None
    return [ga, gb]


def _bw_matmul(g, xs, out, attrs, need):
    a, b = xs
    return [
        matmul(g, transpose(b)) if need[0] else None,
        matmul(transpose(a), g) if need[1] else None,
    ]


def _bw_sum(g, xs, out, attrs, need):
    shape = xs[0].shape
    axis = attrs["axis"]
    if axis is not None and not attrs["keepdims"]:
        axes = (axis,) if isinstance(axis, int) else axis
        axes = tuple(ax % len(shape) for ax in axes)
        kshape = tuple(1 if i in axes else s for i, s in enumerate(shape))
        g = reshape(g, kshape)
    elif axis is None:
        g = reshape(g, (1,) * len(shape))
    return [broadcast_to(g, shape)]


def _bw_tanh(g, xs, out, attrs, need):
    return [g * (1.0 - out * out)]


def _bw_pow(g, xs, out, attrs, need):
    p = attrs["p"]
    return [g * (p * power(xs[0], p - 1.0))]


BACKWARD.update(
    {
        "add": _bw_add,
        "sub": _bw_sub,
        "mul": _bw_mul,
        "div": _bw_div,
        "neg": lambda g, xs, out, a, need: [neg(g)],
        "matmul": _bw_matmul,
        "transpose": lambda g, xs, out, a, need: [transpose(g)],
        "reshape": lambda g, xs, out, a, need: [reshape(g, xs[0].shape)],
        "broadcast_to": lambda g, xs, out, a, need: [sum_to(g, xs[0].shape)],
        "sum_to": lambda g, xs, out, a, need: [broadcast_to(g, xs[0].shape)],
        "sum": _bw_sum,
        "tanh": _bw_tanh,
        "relu": lambda g, xs, out, a, need: [g * _step(xs[0])],
        "repu": lambda g, xs, out, a, need: [g * (2.0 * relu(xs[0]))],
        "step": lambda g, xs, out, a, need: [None],
        "exp": lambda g, xs, out, a, need: [g * out],
        "log": lambda g, xs, out, a, need: [g / xs[0]],
        "sin": lambda g, xs, out, a, need: [g * cos(xs[0])],
        "cos": lambda g, xs, out, a, need: [neg(g * sin(xs[0]))],
        "pow": _bw_pow,
        "take": lambda g, xs, out, a, need: [
            scatter_add(g, a["index"], xs[0].shape[a["axis"]], a["axis"])
        ],
        "scatter_add": lambda g, xs, out, a, need: [take(g, a["index"], a["axis"])],
    }
)


# ---------------------------------------------------------------------------
# graph-level operations


def forward_eval(tape: Tape, inputs: Sequence) -> list[np.ndarray]:
    """Replay the tape on new input values.

    Node values are overwritten in place so a following
    :func:`reverse_gradient` uses them. Returns the marked outputs.
    """
    if len(inputs) != len(tape.input_ids):
        raise TapeError(f"expected {len(tape.input_ids)} inputs, got {len(inputs)}")
    for nid, x in zip(tape.input_ids, inputs):
        x = np.asarray(x.value if isinstance(x, Tensor) else x, dtype=np.float64)
        node = tape.nodes[nid]
        if x.shape != node.value.shape:
            raise TapeError(f"input node {nid}: shape {x.shape} != {node.value.shape}")
        _check_finite(x, "input", nid)
        node.value = x.copy()
    for nid, node in enumerate(tape.nodes):
        if node.op in ("input", "const"):
            continue
        with np.errstate(all="ignore"):
            value = FORWARD[node.op]([tape.nodes[i].value for i in node.inputs], node.attrs)
        _check_finite(value, node.op, nid)
        node.value = value
    return [tape.nodes[i].value for i in tape.output_ids]


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def reverse_gradient(
    outputs,
    wrt,
    cotangents=None,
    create_graph: bool = False,
) -> list[Tensor]:
    """Vector-Jacobian product of ``outputs`` w.r.t. the tensors ``wrt``.

    With ``create_graph`` the backward computation is itself recorded on the
    tape and the returned gradients are differentiable.
    """
    outputs = _as_list(outputs)
    wrt = _as_list(wrt)
    tape = outputs[0].tape
    if tape is None:
        raise TapeError("outputs are not recorded on a tape")
    for t in outputs + wrt:
        if t.tape is not tape:
            raise TapeError("all tensors must share one tape")
    if cotangents is None:
        for o in outputs:
            if o.value.size != 1:
                raise TapeError("cotangent required for non-scalar output")
        cotangents = [np.ones_like(o.value) for o in outputs]
    cotangents = _as_list(cotangents)

    nodes = tape.nodes
    lo = min(t.id for t in wrt)
    hi = max(t.id for t in outputs)
    wrt_ids = {t.id for t in wrt}
    # nodes lying on some path from a wrt tensor
    on_path = np.zeros(hi + 1, dtype=bool)
    for nid in range(lo, hi + 1):
        if nid in wrt_ids:
            on_path[nid] = True
        else:
            on_path[nid] = any(i >= lo and on_path[i] for i in nodes[nid].inputs)

    def handle(nid):
        if create_graph:
            return Tensor(nodes[nid].value, tape, nid)
        return Tensor(nodes[nid].value)

    grads: dict[int, Tensor] = {}
    for o, c in zip(outputs, cotangents):
        c = c.value if isinstance(c, Tensor) else np.asarray(c, dtype=np.float64)
        if c.shape != o.shape:
            raise TapeError(f"cotangent shape {c.shape} != output shape {o.shape}")
        seed = tape.constant(c) if create_graph else Tensor(c)
        grads[o.id] = grads[o.id] + seed if o.id in grads else seed

    for nid in range(hi, lo - 1, -1):
        g = grads.get(nid)
        if g is None or not on_path[nid]:
            continue
        node = nodes[nid]
        if not node.inputs:
            continue
        need = [i >= lo and on_path[i] for i in node.inputs]
        if not any(need):
            continue
        rule = BACKWARD.get(node.op)
        if rule is None:
            raise TapeError(f"no backward rule for op '{node.op}' (node {nid})")
        if create_graph and node.op in FIRST_ORDER_ONLY:
            raise TapeError(f"op '{node.op}' (node {nid}) supports first-order gradients only")
        xs = [handle(i) for i in node.inputs]
        gin = rule(g, xs, handle(nid), node.attrs, need)
        for i, gi, nd in zip(node.inputs, gin, need):
            if gi is None or not nd:
                continue
            grads[i] = grads[i] + gi if i in grads else gi

    result = []
    for t in wrt:
        g = grads.get(t.id)
        if g is None:
            z = np.zeros_like(t.value)
            g = tape.constant(z) if create_graph else Tensor(z)
        result.append(g)
    return result


def input_gradient_node(output: Tensor, x: Tensor) -> Tensor:
    """Append nodes computing d(output)/dx, differentiable w.r.t. everything
    upstream of ``output``."""
    if output.value.size != 1:
        raise TapeError("input gradient requires a scalar output")
    return reverse_gradient(output, x, create_graph=True)[0]


def grad(fn: Callable, *args) -> list[np.ndarray]:
    """Gradients of scalar ``fn(*args)`` w.r.t. each array argument."""
    tape = Tape()
    xs = [tape.variable(a) for a in args]
    out = fn(*xs)
    return [g.value for g in reverse_gradient(out, xs)]
