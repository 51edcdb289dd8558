"""Dense float64 tensors with a tape-based reverse-mode differentiator.

The engine is deliberately small: it supports exactly the operations the dual
encoder, the contrastive loss and the gradient attacks need. Operations are
recorded on the innermost active :class:`Tape` whenever at least one input
requires a gradient; outside a tape (or with constant inputs) they are plain
numpy computations.

Example::

    with Tape() as tape:
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        loss = (x * x).sum()
    grads = tape.backward(loss)
    grads[x]  # array([2., 4., 6.])
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

NORM_EPS = 1e-12

_state = threading.local()


class ShapeError(ValueError):
    """Operand shapes are incompatible."""


class DegenerateInputError(ValueError):
    """An input lies where the operation is undefined (e.g. a zero-norm row)."""


class ContractError(RuntimeError):
    """An API precondition was violated."""


def _active_tapes() -> list["Tape"]:
    stack = getattr(_state, "tapes", None)
    if stack is None:
        stack = _state.tapes = []
    return stack


def current_tape() -> "Tape | None":
    stack = _active_tapes()
    return stack[-1] if stack else None


class Tensor:
    """A dense double-precision array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_node")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False):
        data = np.array(values, dtype=np.float64)
        if data.ndim == 0:
            data = data.reshape(())
        self.data = data
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._node: _Node | None = None

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
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return subtract(self, other)

    def __rsub__(self, other):
        return subtract(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return multiply(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis: int | None = None) -> "Tensor":
        return tsum(self, axis)

    def mean(self, axis: int | None = None) -> "Tensor":
        return mean(self, axis)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("output", "inputs", "backward", "name")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward, name: str):
        self.output = output
        self.inputs = inputs
        self.backward = backward
        self.name = name


class Tape:
    """Ordered record of the operations executed while the tape is active.

    Tapes are thread-local: each thread has its own stack of active tapes, so
    independent tapes on different threads never share state.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        _active_tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _active_tapes()
        if stack and stack[-1] is self:
            stack.pop()
        else:  # pragma: no cover - misuse
            stack.remove(self)

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
        """Propagate d(loss)/d(.) through the recorded operations.

        Returns a map from tensor to gradient covering every leaf tensor that
        requires a gradient and was seen by this tape, plus everything in
        ``wrt``; tensors that did not influence ``loss`` map to zeros. The
        gradients are also stored on ``tensor.grad``.
        """
        if loss.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            in_grads = node.backward(g)
            for inp, gi in zip(node.inputs, in_grads):
                if gi is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi

        leaves: dict[int, Tensor] = {}
        for node in self.nodes:
            for inp in node.inputs:
                if inp.requires_grad and inp._node is None:
                    leaves[id(inp)] = inp
        if loss.requires_grad and loss._node is None:
            leaves[id(loss)] = loss
        for t in wrt or ():
            leaves[id(t)] = t

        out: dict[Tensor, np.ndarray] = {}
        for key, t in leaves.items():
            g = grads.get(key)
            g = np.zeros_like(t.data) if g is None else g.reshape(t.shape)
            t.grad = g
            out[t] = g
        return out


def _record(out_data: np.ndarray, inputs: Sequence[Tensor], backward: Callable, name: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out._node = None
    tape = current_tape()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out.requires_grad = needs
    if needs:
        node = _Node(out, tuple(inputs), backward, name)
        out._node = node
        tape.nodes.append(node)
    return out


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(data)):
        raise FloatingPointError(f"{op}: non-finite input")


def _unbroadcast_row(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return g.sum(axis=0).reshape(shape)


def _row_compatible(a: Tensor, b: Tensor, op: str) -> None:
    """Elementwise ops accept equal shapes, a scalar, or a row vector over a matrix."""
    if a.shape == b.shape or b.size == 1 and b.ndim <= 1 or a.size == 1 and a.ndim <= 1:
        return
    if a.ndim == 2 and b.ndim in (1, 2) and b.shape[-1] == a.shape[1] and b.size == a.shape[1]:
        return
    if b.ndim == 2 and a.ndim in (1, 2) and a.shape[-1] == b.shape[1] and a.size == b.shape[1]:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    size = int(np.prod(shape)) if shape else 1
    if size == 1:
        return np.asarray(g.sum()).reshape(shape)
    return _unbroadcast_row(g, shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _row_compatible(a, b, "add")
    out = a.data + b.data
    return _record(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)), "add")


def subtract(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _row_compatible(a, b, "subtract")
    out = a.data - b.data
    return _record(out, (a, b), lambda g: (_reduce_to(g, a.shape), -_reduce_to(g, b.shape)), "subtract")


def scale(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def multiply(a, b) -> Tensor:
    """Elementwise product; one operand may be a scalar tensor or a row vector."""
    a, b = as_tensor(a), as_tensor(b)
    _row_compatible(a, b, "multiply")
    ad, bd = a.data, b.data
    out = ad * bd
    return _record(
        out,
        (a, b),
        lambda g: (_reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)),
        "multiply",
    )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data
    out = ad @ bd
    return _record(out, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def transpose(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose")


def tanh(a: Tensor) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):
        y = np.exp(a.data)
    if not np.all(np.isfinite(y)):
        raise FloatingPointError("exp: overflow")
    return _record(y, (a,), lambda g: (g * y,), "exp")


def gather(table: Tensor, index) -> Tensor:
    """Row lookup ``table[index]``; the backward pass scatter-adds into the table."""
    table = as_tensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if table.ndim != 2:
        raise ShapeError(f"gather: table must be a matrix, got {table.shape}")
    if idx.ndim != 1:
        raise ShapeError(f"gather: index must be 1-d, got {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"gather: index out of range for table with {table.shape[0]} rows")

    def back(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(table.data[idx], (table,), back, "gather")


def tsum(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        out = np.asarray(a.data.sum())
        return _record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")
    out = a.data.sum(axis=axis)
    return _record(out, (a,), lambda g: (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),), "sum")


def mean(a: Tensor, axis: int | None = None) -> Tensor:
    a = as_tensor(a)
    n = a.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


def l2_normalize(v: Tensor) -> Tensor:
    """Scale every row of a matrix to unit Euclidean norm."""
    v = as_tensor(v)
    if v.ndim != 2:
        raise ShapeError(f"l2_normalize: expected a matrix, got {v.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", v.data, v.data))
    if np.any(norms <= NORM_EPS):
        bad = np.flatnonzero(norms <= NORM_EPS).tolist()
        raise DegenerateInputError(f"l2_normalize: rows {bad} have norm <= {NORM_EPS}")
    u = v.data / norms[:, None]

    def back(g):
        # (I - u u^T) g / ||v||, row by row
        proj = np.einsum("ij,ij->i", u, g)
        return ((g - u * proj[:, None]) / norms[:, None],)

    return _record(u, (v,), back, "l2_normalize")


def log_sum_exp(logits: Tensor, axis: int = 1) -> Tensor:
    """Max-shifted ``log(sum(exp(x)))`` along ``axis`` of a matrix."""
    logits = as_tensor(logits)
    x = logits.data
    _check_finite(x, "log_sum_exp")
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (m + np.log(s)).squeeze(axis)
    soft = e / s
    return _record(out, (logits,), lambda g: (np.expand_dims(g, axis) * soft,), "log_sum_exp")


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    point,
    h: float = 1e-3,
    floor: float = 1e-8,
    coords=None,
) -> float:
    """Largest relative gap between tape gradients and central differences.

    ``f`` maps a tensor shaped like ``point`` to a scalar tensor. The relative
    error of each coordinate uses ``max(|g|, floor)`` as the denominator.
    ``coords`` (flat indices) limits the check to a subset of coordinates.
    """
    x0 = np.array(point, dtype=np.float64)
    with Tape() as tape:
        x = Tensor(x0, requires_grad=True)
        y = f(x)
    g = tape.backward(y, wrt=[x])[x]

    flat = x0.reshape(-1)
    idx = np.arange(flat.size) if coords is None else np.asarray(coords, dtype=np.int64).reshape(-1)
    g = g.reshape(-1)[idx]
    num = np.empty(idx.size)
    for j, i in enumerate(idx):
        xp = flat.copy()
        xm = flat.copy()
        xp[i] += h
        xm[i] -= h
        fp = f(Tensor(xp.reshape(x0.shape))).item()
        fm = f(Tensor(xm.reshape(x0.shape))).item()
        num[j] = (fp - fm) / (2.0 * h)
    denom = np.maximum(np.abs(g), floor)
    return float(np.max(np.abs(g - num) / denom))
