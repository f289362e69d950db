"""Dense float64 tensors with a define-by-run reverse-mode tape.

Every differentiable operation that touches a tensor with ``requires_grad``
appends one node to a :class:`Tape`.  Nodes are only ever appended, so the
inputs of a node always precede it and :func:`backward` can walk the tape in
reverse insertion order without a topological sort.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class TapeError(RuntimeError):
    """Raised for misuse of the tape (non-scalar root, mixed tapes)."""


class Node:
    __slots__ = ("op", "inputs", "output", "vjp")

    def __init__(self, op: str, inputs: tuple["Tensor", ...], output: "Tensor",
                 vjp: Callable[[np.ndarray], tuple[np.ndarray | None, ...]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp


class Tape:
    """Append-only record of operations for one forward pass."""

    def __init__(self):
        self.nodes: list[Node] = []

    def record(self, node: Node) -> int:
        self.nodes.append(node)
        return len(self.nodes) - 1

    def __len__(self):
        return len(self.nodes)


_current_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar(
    "autolora_tape", default=None)


@contextlib.contextmanager
def recording() -> Iterator[Tape]:
    """Route every node whose inputs are all leaves onto one shared tape."""
    tape = Tape()
    token = _current_tape.set(tape)
    try:
        yield tape
    finally:
        _current_tape.reset(token)


class Tensor:
    """A float64 array plus the bookkeeping needed to differentiate through it."""

    __slots__ = ("data", "requires_grad", "tape", "node_id")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.tape: Tape | None = None
        self.node_id: int | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def relu(self):
        return relu(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], vjp) -> Tensor:
    out = Tensor(data)
    tracked = [t for t in inputs if t.requires_grad]
    if not tracked:
        return out
    tapes = {id(t.tape): t.tape for t in tracked if t.tape is not None}
    if len(tapes) > 1:
        raise TapeError(f"operation {op!r} mixes tensors from different tapes")
    if tapes:
        tape = next(iter(tapes.values()))
    else:
        tape = _current_tape.get()
        if tape is None:
            tape = Tape()
    out.requires_grad = True
    out.tape = tape
    out.node_id = tape.record(Node(op, tuple(inputs), out, vjp))
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape``, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _make("matmul", ad @ bd, (a, b), vjp)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make("add", a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make("sub", a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def vjp(g):
        return _unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)

    return _make("mul", ad * bd, (a, b), vjp)


def scale(a, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _make("scale", a.data * c, (a,), lambda g: (g * c,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    # subgradient at exactly 0 is 0; NaN inputs stay NaN so divergence is not masked
    mask = a.data > 0
    return _make("relu", np.maximum(a.data, 0.0), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _make("exp", out, (a,), lambda g: (g * out,))


def sum_(a, axis=None) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make("sum", np.asarray(a.data.sum(axis=axis)), (a,), vjp)


def mean(a, axis=None) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else a.shape[axis]
    return scale(sum_(a, axis), 1.0 / count)


def log_softmax(logits) -> Tensor:
    """Row-wise log-softmax with max subtraction."""
    x = as_tensor(logits)
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"log_softmax expects [batch, classes>=2], got {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _make("log_softmax", out, (x,), vjp)


def pick(a, index: np.ndarray) -> Tensor:
    """Select ``a[i, index[i]]`` for every row ``i``."""
    a = as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    if a.ndim != 2 or index.shape != (a.shape[0],):
        raise DimensionError(f"pick: rows {a.shape} vs index {index.shape}")
    rows = np.arange(a.shape[0])
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[rows, index] = g
        return (full,)

    return _make("pick", a.data[rows, index], (a,), vjp)


def batchnorm_train(x, gamma, beta, eps: float) -> tuple[Tensor, np.ndarray, np.ndarray]:
    """Normalise with batch statistics; returns output, batch mean, unbiased batch var."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    n = x.shape[0]
    mu = x.data.mean(axis=0)
    var = x.data.var(axis=0)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gamma.data

    def vjp(g):
        dxhat = g * gd
        dx = inv / n * (n * dxhat - dxhat.sum(axis=0) - xhat * (dxhat * xhat).sum(axis=0))
        return dx, (g * xhat).sum(axis=0), g.sum(axis=0)

    out = _make("batchnorm", xhat * gd + beta.data, (x, gamma, beta), vjp)
    unbiased = var * n / (n - 1) if n > 1 else var
    return out, mu, unbiased


def batchnorm_eval(x, gamma, beta, running_mean: np.ndarray, running_var: np.ndarray,
                   eps: float) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    inv = 1.0 / np.sqrt(running_var + eps)
    xhat = (x.data - running_mean) * inv
    gd = gamma.data

    def vjp(g):
        return g * gd * inv, (g * xhat).sum(axis=0), g.sum(axis=0)

    return _make("batchnorm_eval", xhat * gd + beta.data, (x, gamma, beta), vjp)


class GradMap:
    """Gradients of one root w.r.t. the leaves it was asked about."""

    def __init__(self, grads: dict[int, np.ndarray]):
        self._grads = grads

    def __getitem__(self, leaf: Tensor) -> np.ndarray:
        g = self._grads.get(id(leaf))
        return np.zeros_like(leaf.data) if g is None else g

    def __contains__(self, leaf: Tensor) -> bool:
        return id(leaf) in self._grads


def backward(root: Tensor) -> GradMap:
    """Reverse sweep over ``root``'s tape.

    Leaves that the root does not depend on get exact zeros from
    :meth:`GradMap.__getitem__`.  The tape itself is not modified, so several
    roots recorded on one tape can each be differentiated.
    """
    if root.data.size != 1:
        raise TapeError(f"backward needs a scalar root, got shape {root.shape}")
    leaf_grads: dict[int, np.ndarray] = {}
    if not root.requires_grad:
        return GradMap(leaf_grads)
    if root.tape is None:
        leaf_grads[id(root)] = np.ones_like(root.data)
        return GradMap(leaf_grads)

    pending: dict[int, np.ndarray] = {root.node_id: np.ones_like(root.data)}
    nodes = root.tape.nodes
    for nid in range(root.node_id, -1, -1):
        g = pending.pop(nid, None)
        if g is None:
            continue
        node = nodes[nid]
        for inp, gi in zip(node.inputs, node.vjp(g)):
            if not inp.requires_grad or gi is None:
                continue
            if inp.node_id is not None:
                pending[inp.node_id] = pending[inp.node_id] + gi if inp.node_id in pending else gi
            else:
                key = id(inp)
                leaf_grads[key] = leaf_grads[key] + gi if key in leaf_grads else gi
    return GradMap(leaf_grads)
