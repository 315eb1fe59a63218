"""Minimal define-by-run reverse-mode automatic differentiation.

Operations are plain functions over :class:`Tensor`. While a :class:`Tape` is
active (``with Tape() as tape:``) every operation with at least one input that
requires a gradient is appended to the tape together with its backward rule.
Outside a tape the same functions simply compute values, which is how frozen
forward passes and finite-difference probes are evaluated.

Broadcasting is deliberately narrow: shapes must match exactly, except that a
1-D row vector of length ``n`` may be combined with every row of an ``(m, n)``
matrix, and ``scalar_mul`` scales by a Python float.

Example::

    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        loss = mean(x * x)
    backward(tape, loss)[x]   # array([1., 2.])
"""

from __future__ import annotations

import itertools
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import _kernels
from .errors import ContractError, DimensionError, DomainError

SQRT_EPS = 1e-12

_uid = itertools.count()
_local = threading.local()


class Tensor:
    """Dense float64 array that may participate in differentiation."""

    __slots__ = ("values", "requires_grad", "node_id", "uid", "name", "__weakref__")

    def __init__(self, values, requires_grad: bool = False, name: str | None = None, copy: bool = True):
        self.values = np.array(values, dtype=np.float64, copy=copy or None)
        self.requires_grad = bool(requires_grad)
        self.node_id: int | None = None
        self.uid = next(_uid)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def ndim(self) -> int:
        return self.values.ndim

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0]) if self.size == 1 else float("nan")

    def detach(self) -> Tensor:
        return Tensor(self.values)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; each maps onto a named op below
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scalar_mul(self, float(other))
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of differentiable operations.

    Nodes are appended in execution order, so inputs always precede the
    node that consumes them. Leaving the ``with`` block freezes the tape.
    """

    nodes: list[Node] = field(default_factory=list)
    frozen: bool = False

    def __enter__(self) -> Tape:
        if self.frozen:
            raise ContractError("cannot re-enter a frozen tape")
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()
        self.frozen = True

    def __len__(self) -> int:
        return len(self.nodes)


def _stack() -> list[Tape]:
    if not hasattr(_local, "stack"):
        _local.stack = []
    return _local.stack


def active_tape() -> Tape | None:
    stack = _stack()
    return stack[-1] if stack else None


def _result(op: str, inputs: tuple[Tensor, ...], values: np.ndarray, backward_fn) -> Tensor:
    out = Tensor(values, copy=False)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node_id = len(tape.nodes)
        tape.nodes.append(Node(op, inputs, out, backward_fn))
    return out


# ---------------------------------------------------------------------------
# shape helpers


def _broadcast_kind(a: np.ndarray, b: np.ndarray, op: str) -> str:
    if a.shape == b.shape:
        return "same"
    if a.ndim == 2 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return "row_b"
    if b.ndim == 2 and a.ndim == 1 and a.shape[0] == b.shape[1]:
        return "row_a"
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, kind: str, side: str) -> np.ndarray:
    if kind == "row_" + side:
        return g.sum(axis=0)
    return g


# ---------------------------------------------------------------------------
# operations


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.values, b.values

    def back(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return _result("matmul", (a, b), av @ bv, back)


def sparse_dense_matmul(adj, x) -> Tensor:
    """``adj @ x`` for a constant scipy sparse matrix ``adj``."""
    x = as_tensor(x)
    if x.ndim != 2 or adj.shape[1] != x.shape[0]:
        raise DimensionError(f"sparse_dense_matmul: cannot multiply {adj.shape} by {x.shape}")

    def back(g):
        return (adj.T @ g,)

    return _result("sparse_dense_matmul", (x,), np.asarray(adj @ x.values), back)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a.values, b.values, "add")

    def back(g):
        return _unbroadcast(g, kind, "a"), _unbroadcast(g, kind, "b")

    return _result("add", (a, b), a.values + b.values, back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a.values, b.values, "sub")

    def back(g):
        return _unbroadcast(g, kind, "a"), -_unbroadcast(g, kind, "b")

    return _result("sub", (a, b), a.values - b.values, back)


def elementwise_mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    kind = _broadcast_kind(a.values, b.values, "elementwise_mul")
    av, bv = a.values, b.values

    def back(g):
        ga = _unbroadcast(g * bv, kind, "a") if a.requires_grad else None
        gb = _unbroadcast(g * av, kind, "b") if b.requires_grad else None
        return ga, gb

    return _result("elementwise_mul", (a, b), av * bv, back)


def scalar_mul(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _result("scalar_mul", (x,), c * x.values, lambda g: (c * g,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.values > 0
    return _result("relu", (x,), np.where(mask, x.values, 0.0), lambda g: (g * mask,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.values)
    return _result("exp", (x,), out, lambda g: (g * out,))


def cos(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return _result("cos", (x,), _kernels.cos(xv), lambda g: (-g * _kernels.sin(xv),))


def sin(x) -> Tensor:
    x = as_tensor(x)
    xv = x.values
    return _result("sin", (x,), _kernels.sin(xv), lambda g: (g * _kernels.cos(xv),))


def cf_moments(z, t) -> Tensor:
    """Row 0 is ``mean_n cos(z_n . t_m)``, row 1 is ``mean_n sin(z_n . t_m)``.

    One node for the whole projection. With upstream gradient ``(a, b)`` the
    projection gradient is ``(b * cos - a * sin) / N``; the backward pass
    folds the per-column scales into the small factor of each product, so
    no N x M temporary is allocated after the forward pass.
    """
    z, t = as_tensor(z), as_tensor(t)
    if z.ndim != 2 or t.ndim != 2 or z.shape[1] != t.shape[1]:
        raise DimensionError(f"cf_moments: cannot project {z.shape} onto {t.shape}")
    zv, tv = z.values, t.values
    n = zv.shape[0]
    s = zv @ tv.T
    c = _kernels.cos(s)
    _kernels.sin(s, out=s)
    ones = np.ones(n)  # column sums as matrix-vector products; sum then divide keeps Psi(0) exact
    out = np.stack([ones @ c, ones @ s]) / n

    def back(g):
        a, b = g[0] / n, g[1] / n
        dz = dt = None
        if z.requires_grad:
            dz = c @ (b[:, None] * tv) - s @ (a[:, None] * tv)
        if t.requires_grad:
            # z^T c reads c row-major, about twice as fast as c^T z
            dt = b[:, None] * (zv.T @ c).T - a[:, None] * (zv.T @ s).T
        return dz, dt

    return _result("cf_moments", (z, t), out, back)


def sqrt_eps(x) -> Tensor:
    """``sqrt(x + 1e-12)``; the offset keeps the derivative finite at 0."""
    x = as_tensor(x)
    if np.any(x.values < 0):
        raise DomainError(f"sqrt_eps: negative input (min {x.values.min():.3e})")
    out = np.sqrt(x.values + SQRT_EPS)
    return _result("sqrt_eps", (x,), out, lambda g: (g * 0.5 / out,))


def _check_axis(x: Tensor, axis: int | None, op: str) -> None:
    if axis is not None and not (0 <= axis < max(x.ndim, 1)):
        raise DimensionError(f"{op}: axis {axis} invalid for shape {x.shape}")


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    _check_axis(x, axis, "sum")
    shape = x.shape

    def back(g):
        if axis is None:
            return (np.broadcast_to(float(g), shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _result("sum", (x,), np.sum(x.values, axis=axis), back)


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    _check_axis(x, axis, "mean")
    shape = x.shape
    n = x.size if axis is None else shape[axis]
    if n == 0:
        raise DimensionError("mean: empty reduction")

    def back(g):
        if axis is None:
            return (np.broadcast_to(float(g) / n, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis) / n, shape),)

    return _result("mean", (x,), np.mean(x.values, axis=axis), back)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"log_softmax_rows: expected a matrix, got {x.shape}")
    shifted = x.values - x.values.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)

    def back(g):
        return (g - probs * g.sum(axis=1, keepdims=True),)

    return _result("log_softmax_rows", (x,), out, back)


def gather_rows(x, index) -> Tensor:
    x = as_tensor(x)
    idx = np.asarray(index, dtype=np.int64)
    if x.ndim == 0 or idx.ndim != 1:
        raise DimensionError("gather_rows: need an array input and a 1-D index")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise DimensionError("gather_rows: index out of range")
    shape = x.shape

    def back(g):
        out = np.zeros(shape)
        np.add.at(out, idx, g)
        return (out,)

    return _result("gather_rows", (x,), x.values[idx], back)


def concat_rows(*xs) -> Tensor:
    xs = tuple(as_tensor(x) for x in xs)
    if not xs:
        raise DimensionError("concat_rows: nothing to concatenate")
    tail = {x.shape[1:] for x in xs}
    if len(tail) != 1 or xs[0].ndim == 0:
        raise DimensionError(f"concat_rows: mismatched trailing shapes {sorted(tail)}")
    bounds = np.cumsum([0] + [x.shape[0] for x in xs])

    def back(g):
        return tuple(g[bounds[i] : bounds[i + 1]] for i in range(len(xs)))

    return _result("concat_rows", xs, np.concatenate([x.values for x in xs], axis=0), back)


def transpose(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected a matrix, got {x.shape}")
    return _result("transpose", (x,), x.values.T.copy(), lambda g: (g.T,))


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.values.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"reshape: {exc}") from None
    return _result("reshape", (x,), out.copy(), lambda g: (g.reshape(old),))


# ---------------------------------------------------------------------------
# reverse pass


class Gradients(dict):
    """Mapping from leaf :class:`Tensor` to its gradient array.

    Looking up a leaf that was never reached returns exact zeros.
    """

    def __missing__(self, key: Tensor) -> np.ndarray:
        return np.zeros(key.shape)


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Accumulate d(loss)/d(leaf) for every leaf recorded on ``tape``."""
    if loss.size != 1:
        raise ContractError(f"backward: loss must be a scalar, got shape {loss.shape}")
    grads = Gradients()
    if loss.node_id is None:
        if loss.requires_grad:
            grads[loss] = np.ones(loss.shape)
        return grads
    if loss.node_id >= len(tape.nodes) or tape.nodes[loss.node_id].output is not loss:
        raise ContractError("backward: loss was not recorded on this tape")

    # keyed by uid so intermediates need no hashing of arrays
    pending: dict[int, np.ndarray] = {loss.uid: np.ones(loss.shape)}
    for node in reversed(tape.nodes[: loss.node_id + 1]):
        g = pending.pop(node.output.uid, None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward_fn(g)):
            if gi is None or not inp.requires_grad:
                continue
            gi = np.asarray(gi, dtype=np.float64)
            if inp.node_id is None:
                grads[inp] = grads[inp] + gi if inp in grads else gi.copy()
            else:
                prev = pending.get(inp.uid)
                pending[inp.uid] = gi if prev is None else prev + gi
    return grads


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Max over coordinates of |analytic - central difference| / max(1, |analytic|)."""
    x0 = np.array(x.values if isinstance(x, Tensor) else x, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
    analytic = backward(tape, out)[leaf].reshape(-1)

    flat = x0.reshape(-1)
    numeric = np.empty_like(flat)
    for i in range(flat.size):
        plus, minus = flat.copy(), flat.copy()
        plus[i] += step
        minus[i] -= step
        fp = f(Tensor(plus.reshape(x0.shape))).item()
        fm = f(Tensor(minus.reshape(x0.shape))).item()
        numeric[i] = (fp - fm) / (2 * step)
    if flat.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
