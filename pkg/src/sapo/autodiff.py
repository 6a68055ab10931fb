"""Tape-based reverse-mode autodiff over float64 numpy arrays.

Every primitive builds its output eagerly and, when any input requires a
gradient, attaches a record (inputs + adjoint closure) to the output.
``backward`` linearizes those records into a topologically ordered tape,
replays it in reverse, then drops the records so the graph can be freed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError


class _Record:
    __slots__ = ("inputs", "adjoint")

    def __init__(self, inputs: tuple["Tensor", ...], adjoint: Callable[[np.ndarray], tuple]):
        self.inputs = inputs
        self.adjoint = adjoint


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_record", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._record: _Record | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise ContractError("division by a tensor is not supported")
        return scale(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return take(self, index)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, inputs: Sequence[Tensor], adjoint) -> Tensor:
    out = Tensor(data)
    if any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._record = _Record(tuple(inputs), adjoint)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def neg(a: Tensor) -> Tensor:
    return _make(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    return _make(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def gather_rows(table: Tensor, index) -> Tensor:
    """Embedding lookup: ``table[index]`` for an integer index array of any shape."""
    idx = np.asarray(index, dtype=np.int64)
    if table.data.ndim != 2:
        raise ShapeError(f"gather_rows: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"gather_rows: index out of range for table {table.shape}")

    def adjoint(g):
        out = np.zeros_like(table.data)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, table.shape[1]))
        return (out,)

    return _make(table.data[idx], (table,), adjoint)


def pick(x: Tensor, index) -> Tensor:
    """Select one entry per row along the last axis: ``out[i] = x[i, index[i]]``."""
    idx = np.asarray(index, dtype=np.int64)
    if x.data.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"pick: shapes {x.shape} and {idx.shape}")
    rows = np.arange(x.shape[0])

    def adjoint(g):
        out = np.zeros_like(x.data)
        out[rows, idx] = g
        return (out,)

    return _make(x.data[rows, idx], (x,), adjoint)


def take(x: Tensor, index) -> Tensor:
    """Basic/advanced numpy indexing with a scatter-add adjoint."""

    def adjoint(g):
        out = np.zeros_like(x.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(x.data[index]), (x,), adjoint)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    try:
        data = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {shape}") from None
    return _make(data, (x,), lambda g: (g.reshape(x.shape),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _make(t, (x,), lambda g: (g * (1.0 - t * t),))


def log_softmax(x: Tensor) -> Tensor:
    """log-softmax over the last axis.

    The normalizer is ``max + log1p(sum of the non-max exps)`` so that a
    dominant logit yields a tiny negative log-probability instead of an
    exact 0.
    """
    m = x.data.max(axis=-1, keepdims=True)
    e = np.exp(x.data - m)
    # drop exactly one max entry (exp(0) == 1) per row before summing
    top = np.argmax(x.data, axis=-1)[..., None]
    np.put_along_axis(e, top, 0.0, axis=-1)
    out = (x.data - m) - np.log1p(e.sum(axis=-1, keepdims=True))
    p = np.exp(out)
    return _make(out, (x,), lambda g: (g - p * g.sum(axis=-1, keepdims=True),))


def sum_(x: Tensor, axis=None) -> Tensor:
    def adjoint(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), x.shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), adjoint)


def mean(x: Tensor, axis=None) -> Tensor:
    n = x.size if axis is None else x.shape[axis]
    return scale(sum_(x, axis), 1.0 / n)


def log_sigmoid(x: Tensor) -> Tensor:
    """log σ(x) = −softplus(−x), branch-stable for large |x|."""
    d = x.data
    z = np.exp(-np.abs(d))
    out = np.where(d >= 0, 0.0, d) - np.log1p(z)
    # d/dx log σ(x) = 1 − σ(x) = σ(−x)
    sig_neg = np.where(d >= 0, z, 1.0) / (1.0 + z)
    return _make(out, (x,), lambda g: (g * sig_neg,))


def log1mexp_value(x: np.ndarray) -> np.ndarray:
    """log(1 − eˣ) for x < 0 using the two-branch formula."""
    x = np.asarray(x, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(x > -np.log(2.0), np.log(-np.expm1(x)), np.log1p(-np.exp(x)))


def log1mexp(x: Tensor) -> Tensor:
    out = log1mexp_value(x.data)
    # d/dx log(1 − eˣ) = −eˣ / (1 − eˣ) = −1 / expm1(−x)
    with np.errstate(divide="ignore"):
        dx = -1.0 / np.expm1(-x.data)
    return _make(out, (x,), lambda g: (g * dx,))


# ---------------------------------------------------------------- reverse pass


def build_tape(root: Tensor) -> list[Tensor]:
    """Topologically ordered list of recorded nodes reachable from ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node._record is not None:
            for parent in node._record.inputs:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate ∂loss/∂leaf into ``.grad`` of every reachable leaf, then clear the tape."""
    if loss.size != 1:
        raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = build_tape(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        rec = node._record
        if rec is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(rec.inputs, rec.adjoint(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
    for node in tape:
        node._record = None


# ---------------------------------------------------------------- checking


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    passed: bool
    n_checked: int


def grad_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    step: float = 1e-6,
    tol: float = 1e-5,
) -> GradCheckReport:
    """Compare ``backward`` against central differences on every parameter entry.

    ``f`` re-evaluates the scalar loss from the current contents of ``params``.
    """
    if step <= 0 or tol <= 0:
        raise ContractError("grad_check requires step > 0 and tol > 0")
    for p in params:
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise NumericError("grad_check: non-finite loss at the base point")
    backward(loss)
    worst, count = 0.0, 0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = f().item()
            flat[i] = orig - step
            down = f().item()
            flat[i] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise NumericError(f"grad_check: non-finite loss probing {p.name or 'param'}[{i}]")
            numeric = (up - down) / (2.0 * step)
            a = analytic.reshape(-1)[i]
            rel = abs(a - numeric) / max(1e-12, abs(a) + abs(numeric))
            worst = max(worst, rel)
            count += 1
    return GradCheckReport(max_rel_error=worst, passed=worst < tol, n_checked=count)
