"""Reverse-mode automatic differentiation over small dense tensors.

A Wengert-list engine: primitives executed while a ``Tape`` is active append
(output, parents, backward) records in execution order, which is a topological
order by construction (parents are always created before their consumers).
``backward`` replays the list once in reverse and deposits gradients on
requires-grad leaves.

Scope is deliberately narrow: float64 data, rank <= 3, no general
broadcasting (elementwise ops accept equal shapes or a scalar operand), plus
the structural primitives the GNN stack needs (concat, row gather/scatter,
slicing). Tensors not attached to a tape are plain value holders and are safe
to share read-only.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "DomainError",
    "ShapeError",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "broadcast_rows",
    "concat",
    "elementwise",
    "exp",
    "gather_rows",
    "log",
    "matmul",
    "mul",
    "reduce",
    "reduce_max",
    "reduce_mean",
    "reduce_sum",
    "relu",
    "reshape",
    "scale",
    "segment_sum",
    "slice_axis",
    "softmax",
    "sub",
    "tanh",
]

_MAX_RANK = 3


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class DomainError(ValueError):
    """Input values fall outside an operation's domain."""


class Tensor:
    """Dense float64 array, optionally tracked for reverse-mode gradients.

    ``grad`` is populated (and accumulated across ``backward`` calls) only on
    leaves, i.e. tensors created directly with ``requires_grad=True`` rather
    than produced by a primitive.
    """

    __slots__ = ("data", "requires_grad", "grad", "tape")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > _MAX_RANK:
            raise ShapeError(f"rank {arr.ndim} exceeds supported maximum {_MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

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
            return scale(self, other)
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


_Record = tuple[Tensor, tuple[Tensor, ...], Callable[[np.ndarray], tuple]]
_ACTIVE_TAPES: list["Tape"] = []


class Tape:
    """Ordered record of primitive operations for one reverse sweep.

    Use as a context manager around the forward pass; every primitive whose
    inputs require gradients appends one record. The list is topologically
    ordered because records are appended at execution time.
    """

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _ACTIVE_TAPES.pop()

    def __len__(self) -> int:
        return len(self._records)

    def backward(self, root: Tensor) -> None:
        if root.tape is not self:
            raise ValueError("root was not recorded on this tape")
        backward(root)


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``grad`` of every requires-grad leaf.

    The root must be scalar. The recorded tape is swept exactly once in
    reverse; repeated calls accumulate into existing gradients until leaves
    are cleared with ``zero_grad``.
    """
    if root.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.shape}")
    tape = root.tape
    if tape is None:
        raise ValueError("root is not attached to a tape; run the forward pass inside `with Tape():`")

    adjoint: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    holder: dict[int, Tensor] = {id(root): root}
    for out, parents, backfn in reversed(tape._records):
        g = adjoint.pop(id(out), None)
        if g is None:
            continue
        holder.pop(id(out), None)
        for parent, pg in zip(parents, backfn(g)):
            if pg is None or not parent.requires_grad:
                continue
            pid = id(parent)
            if pid in adjoint:
                adjoint[pid] = adjoint[pid] + pg
            else:
                adjoint[pid] = pg
                holder[pid] = parent

    for pid, g in adjoint.items():
        leaf = holder[pid]
        if leaf.grad is None:
            leaf.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            leaf.grad = leaf.grad + g


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _emit(data: np.ndarray, parents: tuple[Tensor, ...], backfn) -> Tensor:
    out = Tensor(data)
    if _ACTIVE_TAPES and any(p.requires_grad for p in parents):
        tape = _ACTIVE_TAPES[-1]
        out.requires_grad = True
        out.tape = tape
        tape._records.append((out, parents, backfn))
    return out


def _check_binary(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"shapes {a.shape} and {b.shape}: only equal shapes or a scalar operand")


def _unbroadcast(g: np.ndarray, t: Tensor) -> np.ndarray:
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


# ---------------------------------------------------------------------------
# arithmetic primitives


def matmul(a, b) -> Tensor:
    """Matrix product of two rank-2 tensors."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul requires rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul inner extents disagree: {a.shape} @ {b.shape}")

    def backfn(g):
        return g @ b.data.T, a.data.T @ g

    return _emit(a.data @ b.data, (a, b), backfn)


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)

    def backfn(g):
        return _unbroadcast(g, a), _unbroadcast(g, b)

    return _emit(a.data + b.data, (a, b), backfn)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)

    def backfn(g):
        return _unbroadcast(g, a), _unbroadcast(-g, b)

    return _emit(a.data - b.data, (a, b), backfn)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_binary(a, b)

    def backfn(g):
        return _unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)

    return _emit(a.data * b.data, (a, b), backfn)


def scale(a, c) -> Tensor:
    """Multiply by a Python scalar constant (no gradient w.r.t. ``c``)."""
    a = _as_tensor(a)
    c = float(c)

    def backfn(g):
        return (g * c,)

    return _emit(a.data * c, (a,), backfn)


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0

    def backfn(g):
        return (g * mask,)

    return _emit(np.where(mask, a.data, 0.0), (a,), backfn)


def tanh(a) -> Tensor:
    a = _as_tensor(a)
    y = np.tanh(a.data)

    def backfn(g):
        return (g * (1.0 - y * y),)

    return _emit(y, (a,), backfn)


def exp(a) -> Tensor:
    a = _as_tensor(a)
    y = np.exp(a.data)

    def backfn(g):
        return (g * y,)

    return _emit(y, (a,), backfn)


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0):
        raise DomainError("log requires strictly positive inputs")

    def backfn(g):
        return (g / a.data,)

    return _emit(np.log(a.data), (a,), backfn)


_BINARY = {"add": add, "sub": sub, "mul": mul}
_UNARY = {"relu": relu, "tanh": tanh, "exp": exp, "log": log}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by name over the pointwise primitive set."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} requires two operands")
        return _BINARY[kind](a, b)
    if kind == "scale":
        if b is None:
            raise ValueError("scale requires a scalar factor")
        return scale(a, b)
    if kind in _UNARY:
        if b is not None:
            raise ValueError(f"{kind} takes a single operand")
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


# ---------------------------------------------------------------------------
# reductions


def _check_axis(a: Tensor, axis) -> None:
    if axis is None:
        return
    if not isinstance(axis, int) or not -a.ndim <= axis < a.ndim:
        raise ShapeError(f"axis {axis!r} invalid for shape {a.shape}")


def reduce_sum(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    _check_axis(a, axis)

    def backfn(g):
        if axis is None:
            return (np.full_like(a.data, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _emit(a.data.sum(axis=axis), (a,), backfn)


def reduce_mean(a, axis: int | None = None) -> Tensor:
    a = _as_tensor(a)
    _check_axis(a, axis)
    n = a.size if axis is None else a.shape[axis]

    def backfn(g):
        if axis is None:
            return (np.full_like(a.data, float(g) / n),)
        return (np.broadcast_to(np.expand_dims(g / n, axis), a.shape).copy(),)

    return _emit(a.data.mean(axis=axis), (a,), backfn)


def reduce_max(a, axis: int | None = None) -> Tensor:
    """Max-reduce; the adjoint routes to the first maximal element (lowest index)."""
    a = _as_tensor(a)
    _check_axis(a, axis)
    if axis is None:
        flat_idx = int(a.data.argmax())

        def backfn(g):
            z = np.zeros_like(a.data)
            z.flat[flat_idx] = float(g)
            return (z,)

        return _emit(a.data.max(), (a,), backfn)

    idx = a.data.argmax(axis=axis)

    def backfn(g):
        z = np.zeros_like(a.data)
        np.put_along_axis(z, np.expand_dims(idx, axis), np.expand_dims(g, axis), axis)
        return (z,)

    return _emit(a.data.max(axis=axis), (a,), backfn)


_REDUCERS = {"sum": reduce_sum, "mean": reduce_mean, "max": reduce_max}


def reduce(kind: str, a, axis: int | None = None) -> Tensor:
    if kind not in _REDUCERS:
        raise ValueError(f"unknown reduce kind {kind!r}")
    return _REDUCERS[kind](a, axis)


def softmax(a, axis: int = -1) -> Tensor:
    """Shift-stabilized softmax along ``axis``; rejects non-finite input."""
    a = _as_tensor(a)
    _check_axis(a, axis)
    if not np.all(np.isfinite(a.data)):
        raise DomainError("softmax requires finite inputs")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def backfn(g):
        dot = (g * s).sum(axis=axis, keepdims=True)
        return (s * (g - dot),)

    return _emit(s, (a,), backfn)


# ---------------------------------------------------------------------------
# structural primitives


def concat(tensors: Sequence, axis: int) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat of empty sequence")
    widths = [t.shape[axis] for t in ts]
    splits = np.cumsum(widths)[:-1]

    def backfn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _emit(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), backfn)


def gather_rows(a, indices) -> Tensor:
    """Select rows (axis 0) by integer index; adjoint scatter-adds back."""
    a = _as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeError("gather_rows requires a 1-D index array")
    if a.ndim < 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[0])):
        raise ShapeError("gather_rows index out of range")

    def backfn(g):
        z = np.zeros_like(a.data)
        np.add.at(z, idx, g)
        return (z,)

    return _emit(a.data[idx], (a,), backfn)


def segment_sum(a, segment_ids, num_segments: int) -> Tensor:
    """Sum rows of ``a`` into ``num_segments`` buckets; adjoint gathers back."""
    a = _as_tensor(a)
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.ndim != 1 or seg.shape[0] != a.shape[0]:
        raise ShapeError("segment ids must be 1-D with one id per row")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ShapeError("segment id out of range")
    out = np.zeros((num_segments,) + a.shape[1:], dtype=np.float64)
    np.add.at(out, seg, a.data)

    def backfn(g):
        return (g[seg],)

    return _emit(out, (a,), backfn)


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in shape)

    def backfn(g):
        return (g.reshape(a.shape),)

    return _emit(a.data.reshape(shape), (a,), backfn)


def slice_axis(a, axis: int, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    _check_axis(a, axis)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, stop)
    sl = tuple(sl)

    def backfn(g):
        z = np.zeros_like(a.data)
        z[sl] = g
        return (z,)

    return _emit(a.data[sl].copy(), (a,), backfn)


def broadcast_rows(a, n: int) -> Tensor:
    """Tile a (H,) or (1, H) tensor to (n, H); adjoint sums over rows."""
    a = _as_tensor(a)
    if a.ndim == 1:
        target = (n, a.shape[0])

        def backfn(g):
            return (g.sum(axis=0),)

    elif a.ndim == 2 and a.shape[0] == 1:
        target = (n, a.shape[1])

        def backfn(g):
            return (g.sum(axis=0, keepdims=True),)

    else:
        raise ShapeError(f"broadcast_rows expects (H,) or (1, H), got {a.shape}")
    return _emit(np.broadcast_to(a.data, target).copy(), (a,), backfn)
