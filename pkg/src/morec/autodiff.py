"""Reverse-mode automatic differentiation on a dynamic tape.

Design
------
A `Tensor` wraps a dense row-major float64 array.  Primitive operations
compute their result eagerly and, while a `Tape` is active, append a backward
closure to it.  `Tape.backward` replays the closures in reverse recording
order (a valid topological order of the implied graph, since every input to
an operation was recorded before it), accumulates adjoints, writes them into
the `.grad` of every requires-grad tensor it reaches, and clears itself.

The tape is rebuilt on every forward pass; there is no retained graph, no
broadcasting, and no optimizer beyond plain SGD.  With no tape active the
same operations run as pure (and cheaper) forward arithmetic, which is how
evaluation rollouts and finite-difference probes execute.

A tape and the tensors recorded on it belong to one logical thread; the
active-tape pointer is thread-local so concurrent evaluation threads cannot
observe each other's recordings.
"""

from __future__ import annotations

import re
import threading
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np


class AutodiffError(Exception):
    """Base class for engine contract violations."""


class ShapeError(AutodiffError):
    """Operand shapes violate a primitive's contract."""


class TapeError(AutodiffError):
    """Tape misuse: empty backward, nested activation, missing gradients."""


_LOCAL = threading.local()


def _active_ops() -> list | None:
    return getattr(_LOCAL, "ops", None)


class Tensor:
    """Dense float64 value with an optional same-shape gradient buffer.

    `grad` is None until a backward pass reaches the tensor; afterwards it
    accumulates across backward passes until explicitly zeroed.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64, order="C", ndmin=2)
        if arr.ndim != 2:
            raise ShapeError(f"tensors are rank-2, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a 1-element tensor, got {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


class Tape:
    """Ordered record of primitive operations from one forward pass."""

    __slots__ = ("_ops",)

    def __init__(self):
        self._ops: list[tuple[Tensor, Callable]] = []

    def __enter__(self) -> "Tape":
        if _active_ops() is not None:
            raise TapeError("a tape is already active on this thread")
        _LOCAL.ops = self._ops
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _LOCAL.ops = None

    def __len__(self) -> int:
        return len(self._ops)

    def backward(self, loss: Tensor, *stores: "ParameterStore") -> None:
        """Populate gradients of `loss` w.r.t. every requires-grad tensor.

        Clears the tape: a second backward without a fresh forward pass is a
        contract error.  Any tensor held by one of `stores` that the loss
        does not reach gets an explicit zero gradient.
        """
        if not self._ops:
            raise TapeError("backward on an empty tape (no recorded forward pass)")
        if loss.data.size != 1:
            raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        adjoint: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for out, back in reversed(self._ops):
            g = adjoint.get(id(out))
            if g is None:
                continue
            back(g, adjoint, tensors)
        self._ops.clear()
        for tid, t in tensors.items():
            if t.requires_grad:
                if t.grad is None:
                    t.grad = adjoint[tid].copy()
                else:
                    t.grad += adjoint[tid]
        for store in stores:
            for t in store.tensors():
                if t.grad is None:
                    t.grad = np.zeros_like(t.data)


def _acc(adjoint: dict, tensors: dict, t: Tensor, delta: np.ndarray) -> None:
    tid = id(t)
    g = adjoint.get(tid)
    if g is None:
        adjoint[tid] = delta.copy()
        tensors[tid] = t
    else:
        g += delta


def _record(out: Tensor, back: Callable) -> Tensor:
    ops = _active_ops()
    if ops is not None:
        ops.append((out, back))
    return out


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    out.requires_grad = a.requires_grad or b.requires_grad

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g @ b.data.T)
        _acc(adjoint, tensors, b, a.data.T @ g)

    return _record(out, back)


def _binary_same_shape(a: Tensor, b: Tensor, name: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{name} needs equal shapes, got {a.shape} and {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape(a, b, "add")
    out = Tensor(a.data + b.data)
    out.requires_grad = a.requires_grad or b.requires_grad

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g)
        _acc(adjoint, tensors, b, g)

    return _record(out, back)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data)
    out.requires_grad = a.requires_grad or b.requires_grad

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g)
        _acc(adjoint, tensors, b, -g)

    return _record(out, back)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _binary_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data)
    out.requires_grad = a.requires_grad or b.requires_grad

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g * b.data)
        _acc(adjoint, tensors, b, g * a.data)

    return _record(out, back)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(a.data * c)
    out.requires_grad = a.requires_grad

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g * c)

    return _record(out, back)


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if axis not in (0, 1):
        raise ShapeError(f"concat axis must be 0 or 1, got {axis}")
    if not parts:
        raise ShapeError("concat of an empty sequence")
    other = 1 - axis
    ref = parts[0].shape[other]
    for p in parts[1:]:
        if p.shape[other] != ref:
            raise ShapeError(
                f"concat needs equal shapes off-axis: {[p.shape for p in parts]}"
            )
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    out.requires_grad = any(p.requires_grad for p in parts)
    sizes = [p.shape[axis] for p in parts]

    def back(g, adjoint, tensors):
        lo = 0
        for p, n in zip(parts, sizes):
            piece = g[lo : lo + n] if axis == 0 else g[:, lo : lo + n]
            _acc(adjoint, tensors, p, piece)
            lo += n

    return _record(out, back)


def sigmoid(a: Tensor) -> Tensor:
    out = Tensor(_sigmoid(a.data))
    out.requires_grad = a.requires_grad
    s = out.data

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g * s * (1.0 - s))

    return _record(out, back)


def tanh(a: Tensor) -> Tensor:
    out = Tensor(np.tanh(a.data))
    out.requires_grad = a.requires_grad
    t = out.data

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g * (1.0 - t * t))

    return _record(out, back)


def softmax(a: Tensor) -> Tensor:
    """Row-wise softmax over the last axis, max-subtracted for stability."""
    out = Tensor(_softmax(a.data))
    out.requires_grad = a.requires_grad
    y = out.data

    def back(g, adjoint, tensors):
        dot = np.sum(g * y, axis=-1, keepdims=True)
        _acc(adjoint, tensors, a, y * (g - dot))

    return _record(out, back)


def l1_sum(pred: Tensor, target: Tensor) -> Tensor:
    """Sum of absolute errors; subgradient 0 where the error is exactly 0."""
    _binary_same_shape(pred, target, "l1_sum")
    diff = pred.data - target.data
    out = Tensor(np.sum(np.abs(diff)))
    out.requires_grad = pred.requires_grad or target.requires_grad
    sgn = np.sign(diff)

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, pred, g.reshape(()) * sgn)
        _acc(adjoint, tensors, target, -g.reshape(()) * sgn)

    return _record(out, back)


def mse_mean(pred: Tensor, target: Tensor) -> Tensor:
    _binary_same_shape(pred, target, "mse_mean")
    diff = pred.data - target.data
    out = Tensor(np.mean(diff * diff))
    out.requires_grad = pred.requires_grad or target.requires_grad
    coeff = 2.0 / diff.size

    def back(g, adjoint, tensors):
        d = g.reshape(()) * coeff * diff
        _acc(adjoint, tensors, pred, d)
        _acc(adjoint, tensors, target, -d)

    return _record(out, back)


def add_row(a: Tensor, row: Tensor) -> Tensor:
    """Add a (1, d) row vector to every row of a (B, d) tensor."""
    if row.shape != (1, a.shape[1]):
        raise ShapeError(f"add_row needs a (1, {a.shape[1]}) row, got {row.shape}")
    out = Tensor(a.data + row.data)
    out.requires_grad = a.requires_grad or row.requires_grad

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g)
        _acc(adjoint, tensors, row, g.sum(axis=0, keepdims=True))

    return _record(out, back)


def mul_col(a: Tensor, col: Tensor) -> Tensor:
    """Scale each row of a (B, d) tensor by the matching (B, 1) entry."""
    if col.shape != (a.shape[0], 1):
        raise ShapeError(f"mul_col needs a ({a.shape[0]}, 1) column, got {col.shape}")
    out = Tensor(a.data * col.data)
    out.requires_grad = a.requires_grad or col.requires_grad

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g * col.data)
        _acc(adjoint, tensors, col, np.sum(g * a.data, axis=1, keepdims=True))

    return _record(out, back)


def repeat_cols(a: Tensor, k: int) -> Tensor:
    """Repeat each column k times: (B, d) -> (B, d*k), blocks stay adjacent.

    Together with a constant block-summing matrix this expresses batched
    per-row generated-weight application with plain elementwise and matmul
    primitives.
    """
    if k < 1:
        raise ShapeError(f"repeat_cols needs k >= 1, got {k}")
    out = Tensor(np.repeat(a.data, k, axis=1))
    out.requires_grad = a.requires_grad
    b, d = a.shape

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g.reshape(b, d, k).sum(axis=2))

    return _record(out, back)


def take_row(table: Tensor, index: int) -> Tensor:
    """Row `index` of `table` as a (1, d) tensor; gradients scatter back."""
    n = table.shape[0]
    if not 0 <= index < n:
        raise ShapeError(f"row {index} out of range for table with {n} rows")
    out = Tensor(table.data[index : index + 1].copy())
    out.requires_grad = table.requires_grad

    def back(g, adjoint, tensors):
        full = np.zeros_like(table.data)
        full[index] = g[0]
        _acc(adjoint, tensors, table, full)

    return _record(out, back)


def take_rows(table: Tensor, indices) -> Tensor:
    """Rows of `table` gathered by an index vector; duplicate rows allowed."""
    idx = np.asarray(indices, dtype=np.intp).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"row indices out of range for table {table.shape}")
    out = Tensor(table.data[idx])
    out.requires_grad = table.requires_grad

    def back(g, adjoint, tensors):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        _acc(adjoint, tensors, table, full)

    return _record(out, back)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    if not 0 <= start <= stop <= a.shape[1]:
        raise ShapeError(f"column slice [{start}:{stop}] invalid for {a.shape}")
    out = Tensor(a.data[:, start:stop].copy())
    out.requires_grad = a.requires_grad

    def back(g, adjoint, tensors):
        full = np.zeros_like(a.data)
        full[:, start:stop] = g
        _acc(adjoint, tensors, a, full)

    return _record(out, back)


def reshape(a: Tensor, shape: tuple[int, int]) -> Tensor:
    if int(np.prod(shape)) != a.data.size:
        raise ShapeError(f"cannot reshape {a.shape} to {shape}")
    out = Tensor(a.data.reshape(shape).copy())
    out.requires_grad = a.requires_grad

    def back(g, adjoint, tensors):
        _acc(adjoint, tensors, a, g.reshape(a.data.shape))

    return _record(out, back)


# raw ndarray versions, shared with the vectorized no-grad fast paths


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    shifted = x - np.max(x, axis=-1, keepdims=True)
    ex = np.exp(shifted)
    return ex / np.sum(ex, axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# parameters


_NAME_RE = re.compile(r"^[A-Za-z0-9_.\-/]+$")


class ParameterStore:
    """Named, ordered collection of trainable tensors."""

    __slots__ = ("_items",)

    def __init__(self):
        self._items: dict[str, Tensor] = {}

    def add(self, name: str, t: Tensor) -> Tensor:
        if not _NAME_RE.match(name):
            raise ValueError(f"bad parameter name {name!r}")
        if name in self._items:
            raise ValueError(f"duplicate parameter name {name!r}")
        if not t.requires_grad:
            raise ValueError(f"parameter {name!r} must require gradients")
        self._items[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._items[name]

    def __contains__(self, name: str) -> bool:
        return name in self._items

    def __len__(self) -> int:
        return len(self._items)

    def names(self) -> list[str]:
        return list(self._items)

    def tensors(self) -> Iterator[Tensor]:
        return iter(self._items.values())

    def items(self) -> Iterable[tuple[str, Tensor]]:
        return self._items.items()

    def n_values(self) -> int:
        return sum(t.data.size for t in self.tensors())

    def zero_grads(self) -> None:
        for t in self.tensors():
            if t.grad is None:
                t.grad = np.zeros_like(t.data)
            else:
                t.grad[:] = 0.0

    def snapshot(self) -> "ParameterStore":
        """Deep copy of all parameter tensors (gradients not carried over)."""
        out = ParameterStore()
        for name, t in self.items():
            out.add(name, Tensor(t.data.copy(), requires_grad=True))
        return out

    def load_from(self, other: "ParameterStore") -> None:
        if other.names() != self.names():
            raise ValueError("parameter stores hold different tensors")
        for name, t in self.items():
            src = other[name]
            if src.shape != t.shape:
                raise ShapeError(f"shape mismatch for {name!r}")
            t.data[:] = src.data

    # -- flat text snapshot format ------------------------------------
    # line 1: "morec-params 1"     (format tag, version)
    # line 2: tensor count
    # per tensor: "<name-length> <name> <rank> <dims...>"
    #             one line of space-separated values (repr round-trips
    #             float64 exactly)

    def save(self, path: str) -> None:
        lines = ["morec-params 1", str(len(self._items))]
        for name, t in self.items():
            dims = " ".join(str(d) for d in t.shape)
            lines.append(f"{len(name)} {name} {t.data.ndim} {dims}")
            lines.append(" ".join(repr(float(v)) for v in t.data.reshape(-1)))
        with open(path, "w", encoding="ascii") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path: str) -> "ParameterStore":
        with open(path, "r", encoding="ascii") as fh:
            lines = fh.read().splitlines()
        if not lines or lines[0] != "morec-params 1":
            raise ValueError(f"{path}: not a morec-params v1 snapshot")
        count = int(lines[1])
        store = cls()
        row = 2
        for _ in range(count):
            head = lines[row].split()
            name_len = int(head[0])
            name = head[1]
            if len(name) != name_len:
                raise ValueError(f"{path}: corrupt header near {name!r}")
            rank = int(head[2])
            dims = tuple(int(d) for d in head[3 : 3 + rank])
            values = np.array([float(v) for v in lines[row + 1].split()])
            if values.size != int(np.prod(dims)):
                raise ValueError(f"{path}: value count mismatch for {name!r}")
            store.add(name, Tensor(values.reshape(dims), requires_grad=True))
            row += 2
        return store


def uniform_param(rng: np.random.Generator, shape: tuple[int, int], fan_in: int | None = None) -> Tensor:
    """Weight init: uniform in +-1/sqrt(fan_in); fan_in defaults to shape[0]."""
    limit = 1.0 / np.sqrt(float(fan_in if fan_in is not None else shape[0]))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zero_param(shape: tuple[int, int]) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def sgd_step(store: ParameterStore, lr: float) -> None:
    """w <- w - lr * grad(w) for every parameter, then zero the gradients."""
    for name, t in store.items():
        if t.grad is None:
            raise TapeError(f"sgd_step before backward: parameter {name!r} has no gradient")
    for t in store.tensors():
        t.data -= lr * t.grad
        t.grad[:] = 0.0


def finite_diff_check(f: Callable[[], Tensor], store: ParameterStore, eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    `f` must rebuild the forward pass from `store`'s current values on every
    call and return a scalar loss.  Relative error is
    |analytic - numeric| / (|analytic| + |numeric| + 1e-12), maximized over
    every parameter component.
    """
    store.zero_grads()
    tape = Tape()
    with tape:
        loss = f()
    tape.backward(loss, store)
    analytic = {name: t.grad.copy() for name, t in store.items()}
    store.zero_grads()
    worst = 0.0
    for name, t in store.items():
        flat = t.data.reshape(-1)
        ana = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            hi = f().item()
            flat[i] = orig - eps
            lo = f().item()
            flat[i] = orig
            numeric = (hi - lo) / (2.0 * eps)
            err = abs(ana[i] - numeric) / (abs(ana[i]) + abs(numeric) + 1e-12)
            if err > worst:
                worst = err
    return worst
