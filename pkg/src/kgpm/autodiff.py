"""Tape-based reverse-mode autodiff over dense float64 matrices.

Every :class:`Value` is a 2-D array. Primitives executed inside a
``with Tape():`` block are recorded together with their vector-Jacobian
product, and :meth:`Tape.backward` replays them in reverse. There is no
broadcasting: operands of elementwise ops must have identical shapes and the
only scalar operation is :func:`scale`.

Example::

    x = Value([[3.0]], requires_grad=True)
    with Tape() as tape:
        loss = sum_all(hadamard(x, x))
    tape.backward(loss)
    x.grad  # [[6.]]
"""
from __future__ import annotations

import logging
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import NumericalError, KgpmError, ShapeError

logger = logging.getLogger(__name__)

_local = threading.local()


def _active() -> list["Tape"]:
    # tapes are confined to the thread that opened them
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Value:
    """A 2-D float64 array that can take part in recorded computations."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"Value must be at most 2-D, got shape {arr.shape}")
        _check_finite(arr, "leaf")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name
        self._tape: Tape | None = None

    @classmethod
    def _result(cls, data: np.ndarray, requires_grad: bool) -> "Value":
        out = cls.__new__(cls)
        out.data = data
        out.requires_grad = requires_grad
        out.grad = None
        out.name = None
        out._tape = None
        return out

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def is_leaf(self) -> bool:
        return self._tape is None

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Value{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __matmul__(self, other):
        return matmul(self, other)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Value):
            return hadamard(self, other)
        return scale(self, other)

    __rmul__ = __mul__


@dataclass
class Op:
    kind: str
    inputs: tuple[Value, ...]
    output: Value
    vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]
    saved: dict = field(default_factory=dict)


class Tape:
    """Ordered record of the primitives executed while the tape is active."""

    def __init__(self):
        self.ops: list[Op] = []
        self._consumed = False

    def __enter__(self):
        _active().append(self)
        return self

    def __exit__(self, *exc):
        _active().remove(self)
        return False

    def reset(self):
        self.ops.clear()
        self._consumed = False

    def leaves(self) -> list[Value]:
        seen: dict[int, Value] = {}
        for op in self.ops:
            for v in op.inputs:
                if v.is_leaf and v.requires_grad:
                    seen.setdefault(id(v), v)
        return list(seen.values())

    def backward(self, loss: Value, accumulate: bool = True) -> dict[int, np.ndarray]:
        """Propagate d(loss) back to every leaf recorded on this tape.

        Returns ``{id(leaf): grad}``. With ``accumulate`` the gradients are
        also added into ``leaf.grad``.
        """
        if self._consumed:
            raise KgpmError("backward already ran on this tape; call reset() first")
        if not self.ops:
            raise KgpmError("backward on an empty tape")
        if loss.shape != (1, 1):
            raise ShapeError(f"loss must have shape (1, 1), got {loss.shape}")
        if loss._tape is not self:
            raise KgpmError("loss was not recorded on this tape")
        self._consumed = True
        grads: dict[int, np.ndarray] = {id(loss): np.ones((1, 1))}
        for op in reversed(self.ops):
            g = grads.pop(id(op.output), None)
            if g is None:
                continue
            for inp, ig in zip(op.inputs, op.vjp(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig
        out = {}
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            if g is None:
                g = np.zeros_like(leaf.data)
            out[id(leaf)] = g
            if accumulate:
                leaf.grad += g
        return out


def backward(loss: Value) -> None:
    """Backpropagate ``loss`` on the tape that recorded it."""
    if loss._tape is None:
        raise KgpmError("loss was not produced inside an active Tape")
    loss._tape.backward(loss)


def zero_grad(values: Sequence[Value]) -> None:
    for v in values:
        if v.requires_grad:
            v.grad = np.zeros_like(v.data)


def _check_finite(arr: np.ndarray, kind: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"non-finite values produced by {kind}")


def _emit(kind, inputs, data, vjp, saved=None) -> Value:
    _check_finite(data, kind)
    needs = any(v.requires_grad for v in inputs)
    out = Value._result(data, needs)
    stack = _active()
    if stack:
        tape = stack[-1]
        out._tape = tape
        tape.ops.append(Op(kind, tuple(inputs), out, vjp, saved or {}))
    return out


def _same_shape(kind, a: Value, b: Value) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {a.shape} vs {b.shape}")


def _as_value(x) -> Value:
    return x if isinstance(x, Value) else Value(x)


def _indices(indices, bound: int, kind: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise ShapeError(f"{kind}: index out of range for {bound} rows")
    return idx


# -- primitives ---------------------------------------------------------------

def matmul(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    return _emit("matmul", (a, b), A @ B, lambda g: (g @ B.T, A.T @ g))


def transpose(a: Value) -> Value:
    return _emit("transpose", (a,), a.data.T.copy(), lambda g: (g.T,))


def add(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _same_shape("add", a, b)
    return _emit("add", (a, b), a.data + b.data, lambda g: (g, g))


def sub(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _same_shape("sub", a, b)
    return _emit("sub", (a, b), a.data - b.data, lambda g: (g, -g))


def hadamard(a: Value, b: Value) -> Value:
    a, b = _as_value(a), _as_value(b)
    _same_shape("hadamard", a, b)
    A, B = a.data, b.data
    return _emit("hadamard", (a, b), A * B, lambda g: (g * B, g * A))


def scale(a: Value, s: float) -> Value:
    s = float(s)
    return _emit("scale", (a,), a.data * s, lambda g: (g * s,))


def scale_rows(a: Value, weights) -> Value:
    """Multiply row ``i`` of ``a`` by the constant ``weights[i]``."""
    w = np.asarray(weights, dtype=np.float64).reshape(-1, 1)
    if w.shape[0] != a.shape[0]:
        raise ShapeError(f"scale_rows: {w.shape[0]} weights for {a.shape[0]} rows")
    return _emit("scale_rows", (a,), a.data * w, lambda g: (g * w,))


def relu(a: Value) -> Value:
    mask = a.data > 0
    return _emit("relu", (a,), np.where(mask, a.data, 0.0), lambda g: (g * mask,), {"mask": mask})


def sigmoid(a: Value) -> Value:
    x = a.data
    e = np.exp(-np.abs(x))
    s = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _emit("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def softmax_rows(a: Value) -> Value:
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=1, keepdims=True)
    return _emit(
        "softmax_rows", (a,), s, lambda g: (s * (g - (g * s).sum(axis=1, keepdims=True)),)
    )


def log(a: Value, floor: float = 0.0) -> Value:
    """Natural log of ``max(a, floor)``; clamped entries get zero gradient."""
    x = a.data
    mask = x > floor
    clamped = np.where(mask, x, floor)
    with np.errstate(divide="ignore"):
        out = np.log(clamped)
    return _emit(
        "log", (a,), out, lambda g: (np.where(mask, g / clamped, 0.0),), {"mask": mask}
    )


def _exact_means(data: np.ndarray, seg: np.ndarray, counts: np.ndarray) -> np.ndarray:
    # correctly rounded column sums make the mean independent of row order
    # and exactly invariant under duplicating every row
    out = np.zeros((len(counts), data.shape[1]))
    order = np.argsort(seg, kind="stable")
    ends = np.cumsum(counts)
    for s, (end, n) in enumerate(zip(ends, counts)):
        if n:
            block = data[order[end - n:end]]
            out[s] = [math.fsum(col) / n for col in block.T]
    return out


def mean_rows(a: Value) -> Value:
    """Average over rows: (n, d) -> (1, d)."""
    n = a.shape[0]
    if n == 0:
        raise ShapeError("mean_rows of an empty matrix")
    data = _exact_means(a.data, np.zeros(n, dtype=np.int64), np.array([n]))
    return _emit("mean_rows", (a,), data, lambda g: (np.repeat(g / n, n, axis=0),))


def segment_mean(rows: Value, segments, n_segments: int, allow_empty: bool = False) -> Value:
    """Row means grouped by ``segments``: (n, d) -> (n_segments, d).

    Empty segments are an error unless ``allow_empty``, which maps them to zero.
    """
    seg = _indices(segments, n_segments, "segment_mean")
    if seg.size != rows.shape[0]:
        raise ShapeError(f"segment_mean: {seg.size} segment ids for {rows.shape[0]} rows")
    counts = np.bincount(seg, minlength=n_segments)
    if not allow_empty and (counts == 0).any():
        raise ShapeError("segment_mean: empty segment")
    data = _exact_means(rows.data, seg, counts)
    inv = 1.0 / np.maximum(counts, 1)
    return _emit("segment_mean", (rows,), data, lambda g: (g[seg] * inv[seg, None],))


def sum_all(a: Value) -> Value:
    shape = a.shape
    return _emit("sum_all", (a,), a.data.sum().reshape(1, 1), lambda g: (np.full(shape, g[0, 0]),))


def gather_rows(table: Value, indices) -> Value:
    idx = _indices(indices, table.shape[0], "gather_rows")
    n_rows = table.shape[0]

    def vjp(g):
        out = np.zeros((n_rows, g.shape[1]))
        np.add.at(out, idx, g)
        return (out,)

    return _emit("gather_rows", (table,), table.data[idx], vjp)


def scatter_add_rows(target_shape, indices, rows: Value) -> Value:
    """Zero matrix of ``target_shape`` with ``rows[j]`` added into row ``indices[j]``."""
    if isinstance(target_shape, (int, np.integer)):
        target_shape = (int(target_shape), rows.shape[1])
    n_rows, n_cols = target_shape
    if n_cols != rows.shape[1]:
        raise ShapeError(f"scatter_add_rows: {rows.shape[1]} columns into {n_cols}")
    idx = _indices(indices, n_rows, "scatter_add_rows")
    if idx.size != rows.shape[0]:
        raise ShapeError(f"scatter_add_rows: {idx.size} indices for {rows.shape[0]} rows")
    out = np.zeros((n_rows, n_cols))
    np.add.at(out, idx, rows.data)
    return _emit("scatter_add_rows", (rows,), out, lambda g: (g[idx],))


def take(a: Value, columns) -> Value:
    """Pick ``a[i, columns[i]]`` for every row: (n, o) -> (n, 1)."""
    cols = np.asarray(columns, dtype=np.int64).reshape(-1)
    n, o = a.shape
    if cols.size != n:
        raise ShapeError(f"take: {cols.size} column indices for {n} rows")
    if cols.size and (cols.min() < 0 or cols.max() >= o):
        raise ShapeError(f"take: column index out of range for {o} columns")
    rows = np.arange(n)

    def vjp(g):
        out = np.zeros((n, o))
        out[rows, cols] = g[:, 0]
        return (out,)

    return _emit("take", (a,), a.data[rows, cols].reshape(n, 1), vjp)


# -- gradient checking --------------------------------------------------------

@dataclass
class GradCheckReport:
    max_rel_error: float
    checked: int
    excluded_kinks: int
    worst: tuple[int, int] | None = None


def _kink_masks(tape: Tape) -> list[np.ndarray]:
    return [op.saved["mask"] for op in tape.ops if "mask" in op.saved]


def _same_masks(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def grad_check_report(
    builder: Callable[[Sequence[Value]], Value],
    params: Sequence[Value],
    eps: float = 1e-5,
    max_entries: int | None = 5000,
    seed: int = 0,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    Relative error is ``|a - n| / max(|a|, |n|, floor)``. Entries whose
    perturbation flips any relu/log-clamp mask are excluded (non-smooth
    points). Above ``max_entries`` a seeded random subset is checked.
    """
    def run():
        with Tape() as tape:
            loss = builder(params)
        return loss, tape

    loss, tape = run()
    loss_again, _ = run()
    if not np.array_equal(loss.data, loss_again.data):
        raise KgpmError("builder is not deterministic: two forward passes disagree")
    base_masks = _kink_masks(tape)
    analytic = tape.backward(loss, accumulate=False)

    entries = [(pi, j) for pi, p in enumerate(params) for j in range(p.data.size)]
    if max_entries is not None and len(entries) > max_entries:
        rng = np.random.default_rng(seed)
        pick = np.sort(rng.choice(len(entries), size=max_entries, replace=False))
        entries = [entries[i] for i in pick]

    worst, worst_at, checked, excluded = 0.0, None, 0, 0
    for pi, j in entries:
        p = params[pi]
        flat = p.data.reshape(-1)
        orig = flat[j]
        flat[j] = orig + eps
        lp, tp = run()
        flat[j] = orig - eps
        lm, tm = run()
        flat[j] = orig
        if not (_same_masks(base_masks, _kink_masks(tp)) and _same_masks(base_masks, _kink_masks(tm))):
            excluded += 1
            continue
        numeric = (lp.data[0, 0] - lm.data[0, 0]) / (2 * eps)
        a = analytic.get(id(p), np.zeros_like(p.data)).reshape(-1)[j]
        rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
        checked += 1
        if rel > worst:
            worst, worst_at = rel, (pi, j)
    if excluded:
        logger.info("grad check excluded %d entries at relu kinks", excluded)
    return GradCheckReport(float(worst), checked, excluded, worst_at)


def grad_check(builder, params, eps: float = 1e-5, **kwargs) -> float:
    """Maximum relative error between analytic and central-difference gradients."""
    return grad_check_report(builder, params, eps=eps, **kwargs).max_rel_error
