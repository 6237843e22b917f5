"""Dense float64 tensors with tape-based reverse-mode differentiation.

A :class:`Tape` records every primitive applied to inputs that require
gradients while the tape is active. :func:`backward` replays the records in
reverse recording order, which is a reverse topological order by
construction.

    >>> x = Tensor([[1.0, 2.0]], requires_grad=True)
    >>> with Tape():
    ...     loss = (x * x).sum() / 2
    >>> grads = backward(loss)
    >>> grads[x].tolist()
    [[1.0, 2.0]]

Every operation checks its result for NaN/Inf and raises
:class:`~stgkit.errors.NonFiniteError` immediately.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .counting import add_madds
from .errors import ContractError, DimensionError, NonFiniteError

Vjp = Callable[[np.ndarray], Sequence["np.ndarray | None"]]

_local = threading.local()


def _tape_stack() -> list["Tape"]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        bad = int(np.size(arr) - np.count_nonzero(np.isfinite(arr)))
        raise NonFiniteError(f"{op} produced {bad} non-finite value(s)")
    return arr


class Tensor:
    """Immutable float64 array that may participate in a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "name", "_tape", "__weakref__")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.array(data, dtype=np.float64, order="C")
        _check_finite(arr, "Tensor()")
        arr.flags.writeable = False
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._tape: Tape | None = None

    # --- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def set_data(self, data) -> None:
        """Replace the stored values outright (optimizer steps, checkpoint loads)."""
        arr = np.array(data, dtype=np.float64, order="C")
        if arr.shape != self.shape:
            raise DimensionError(f"set_data: shape {arr.shape} != {self.shape}")
        _check_finite(arr, "set_data")
        arr.flags.writeable = False
        self.data = arr

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # --- operators --------------------------------------------------------
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
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # --- method forms -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def swapaxes(self, a: int, b: int) -> "Tensor":
        return swapaxes(self, a, b)

    def sqrt(self) -> "Tensor":
        return sqrt(self)

    def exp(self) -> "Tensor":
        return exp(self)

    def abs(self) -> "Tensor":
        return tabs(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Record:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Vjp
    op: str


class Tape:
    """Ordered log of primitive operations for one differentiation pass.

    Single-threaded: a tape is only visible to the thread that entered it.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._watched: list[Tensor] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def watch(self, *tensors: Tensor) -> None:
        """Register leaves so they receive a (possibly zero) gradient."""
        for t in tensors:
            if not t.requires_grad:
                raise ContractError("watched tensors must have requires_grad=True")
            self._watched.append(t)

    def leaves(self) -> list[Tensor]:
        produced = {id(r.out) for r in self.records}
        seen: dict[int, Tensor] = {}
        for t in self._watched:
            seen.setdefault(id(t), t)
        for r in self.records:
            for t in r.inputs:
                if t.requires_grad and id(t) not in produced:
                    seen.setdefault(id(t), t)
        return list(seen.values())

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            in_grads = rec.vjp(g)
            for t, gi in zip(rec.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise DimensionError(
                        f"{rec.op}: gradient shape {gi.shape} != input shape {t.shape}"
                    )
                _check_finite(gi, f"backward of {rec.op}")
                prev = grads.get(id(t))
                grads[id(t)] = gi if prev is None else prev + gi
        result: dict[Tensor, np.ndarray] = {}
        for leaf in self.leaves():
            g = grads.get(id(leaf))
            g = np.zeros_like(leaf.data) if g is None else np.array(g, dtype=np.float64)
            leaf.grad = g
            result[leaf] = g
        if loss.requires_grad and loss not in result and not self.records:
            g = np.ones_like(loss.data)
            loss.grad = g
            result[loss] = g
        return result


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar ``loss`` for every leaf of the tape that recorded it."""
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = loss._tape
    if tape is None:
        raise ContractError("loss was not produced under an active Tape")
    return tape.backward(loss)


def apply_op(data: np.ndarray, inputs: Sequence[Tensor], vjp: Vjp, op: str) -> Tensor:
    """Wrap a forward result and, when a tape is active, record its VJP.

    ``vjp`` maps the output cotangent to one cotangent (or ``None``) per input.
    """
    _check_finite(data, op)
    out = Tensor.__new__(Tensor)
    arr = np.array(data, dtype=np.float64, order="C", copy=None)
    arr.flags.writeable = False
    out.data = arr
    out.grad = None
    out.name = None
    out._tape = None
    out.requires_grad = False
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._tape = tape
        tape.records.append(_Record(out, tuple(inputs), vjp, op))
    return out


# --- broadcasting helpers ---------------------------------------------------
def _check_prefix_broadcast(a: tuple, b: tuple, op: str) -> None:
    if a == b or a == () or b == ():
        return
    short, long_ = (a, b) if len(a) <= len(b) else (b, a)
    if long_[len(long_) - len(short):] != short:
        raise DimensionError(f"{op}: shapes {a} and {b} differ beyond a leading batch prefix")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --- elementwise ------------------------------------------------------------
def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_prefix_broadcast(a.shape, b.shape, "add")
    return apply_op(
        a.data + b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add",
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_prefix_broadcast(a.shape, b.shape, "sub")
    return apply_op(
        a.data - b.data, (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub",
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_prefix_broadcast(a.shape, b.shape, "mul")
    return apply_op(
        a.data * b.data, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_prefix_broadcast(a.shape, b.shape, "div")
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def vjp(g):
        ga = _unbroadcast(g / b.data, a.shape)
        gb = _unbroadcast(-g * a.data / (b.data * b.data), b.shape)
        return ga, gb

    return apply_op(out, (a, b), vjp, "div")


def sqrt(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(x.data)

    def vjp(g):
        with np.errstate(divide="ignore"):
            return (g / (2.0 * out),)

    return apply_op(out, (x,), vjp, "sqrt")


def exp(x: Tensor) -> Tensor:
    x = as_tensor(x)
    with np.errstate(over="ignore"):
        out = np.exp(x.data)
    return apply_op(out, (x,), lambda g: (g * out,), "exp")


def tabs(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return apply_op(np.abs(x.data), (x,), lambda g: (g * np.sign(x.data),), "abs")


# --- reductions ---------------------------------------------------------------
def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for ax in axis:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, x.shape).copy(),)

    return apply_op(np.asarray(out), (x,), vjp, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return tsum(x, axes, keepdims) / float(count)


# --- shape manipulation ---------------------------------------------------------
def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(tuple(shape))
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {x.shape} to {tuple(shape)}") from exc
    return apply_op(out, (x,), lambda g: (g.reshape(x.shape),), "reshape")


def transpose(x: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for shape {x.shape}")
    inv = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return apply_op(out, (x,), lambda g: (np.ascontiguousarray(g.transpose(inv)),), "transpose")


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    perm = list(range(x.ndim))
    a, b = a % x.ndim, b % x.ndim
    perm[a], perm[b] = perm[b], perm[a]
    return transpose(x, perm)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ContractError("concat needs at least one tensor")
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat: shapes {[t.shape for t in tensors]} disagree off axis {axis}"
            )
    out = np.concatenate([t.data for t in tensors], axis=ax)
    splits = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def vjp(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=ax))

    return apply_op(out, tensors, vjp, "concat")


def getitem(x: Tensor, index) -> Tensor:
    x = as_tensor(x)
    out = x.data[index]

    def vjp(g):
        full = np.zeros(x.shape)
        np.add.at(full, index, g)
        return (full,)

    return apply_op(np.array(out), (x,), vjp, "getitem")


def broadcast_to(x: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit broadcast; the only way to expand a tensor across new axes."""
    x = as_tensor(x)
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError as exc:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from exc
    return apply_op(out.copy(), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")


def gather_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]`` for an integer array; used for embedding lookups."""
    table = as_tensor(table)
    index = np.asarray(index, dtype=np.int64)
    if index.size and (index.min() < 0 or index.max() >= table.shape[0]):
        raise ContractError(f"gather index out of range [0, {table.shape[0]})")

    def vjp(g):
        full = np.zeros(table.shape)
        np.add.at(full, index.reshape(-1), g.reshape(-1, *table.shape[1:]))
        return (full,)

    return apply_op(table.data[index], (table,), vjp, "gather_rows")


# --- linear algebra -----------------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Batched matrix product ``[..., m, k] @ [..., k, p]``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        batch = np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError as exc:
        raise DimensionError(f"matmul batch prefixes incompatible: {a.shape} @ {b.shape}") from exc
    m, k = a.shape[-2:]
    p = b.shape[-1]
    add_madds(int(np.prod(batch, dtype=np.int64)) * m * k * p)
    if b.ndim == 2:
        # Shared right operand: fold the batch into rows for one large product.
        out = (a.data.reshape(-1, k) @ b.data).reshape(a.shape[:-1] + (p,))
    else:
        out = np.matmul(a.data, b.data)

    def vjp(g):
        ga = gb = None
        if b.ndim == 2:
            g2 = g.reshape(-1, p)
            if a.requires_grad:
                ga = (g2 @ b.data.T).reshape(a.shape)
            if b.requires_grad:
                gb = a.data.reshape(-1, k).T @ g2
            return ga, gb
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return apply_op(out, (a, b), vjp, "matmul")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if not -x.ndim <= axis < x.ndim:
        raise DimensionError(f"softmax axis {axis} invalid for shape {x.shape}")
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return apply_op(out, (x,), vjp, "softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gain`` and shift by ``bias``."""
    x, gain, bias = as_tensor(x), as_tensor(gain), as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise DimensionError(f"layer_norm: gain/bias must be ({c},), got {gain.shape}, {bias.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def vjp(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = inv * (
                gh - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        lead = tuple(range(x.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return apply_op(out, (x, gain, bias), vjp, "layer_norm")


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.isfinite(t.data).all() for t in tensors)
