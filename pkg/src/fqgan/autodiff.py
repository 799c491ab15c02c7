"""Reverse-mode automatic differentiation over dense float64 arrays.

Operations executed while a :class:`Tape` is active are recorded in order;
``Tape.backward`` walks the record in reverse. A tape is single-use: one
forward pass, one backward pass.

Broadcasting is intentionally narrow: binary elementwise ops require equal
shapes, and the only broadcast is :func:`add_bias` (``(m, n) + (n,)``).
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.node: int | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" {self.name}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, _wrap(other))

    def __sub__(self, other):
        return sub(self, _wrap(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class Gradients:
    """Gradient lookup for every tensor reached during a backward sweep."""

    def __init__(self, grads: dict[int, np.ndarray], tensors: dict[int, Tensor]):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, t: Tensor) -> np.ndarray:
        g = self._grads.get(id(t))
        if g is None or self._tensors.get(id(t)) is not t:
            return np.zeros_like(t.data)
        return g

    def __contains__(self, t: Tensor) -> bool:
        return self._tensors.get(id(t)) is t


_local = threading.local()


def _active() -> "Tape | None":
    stack = getattr(_local, "stack", None)
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed operations.

    Use as a context manager around the forward pass, then call
    :meth:`backward` (or :meth:`backward_many`) exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        if not hasattr(_local, "stack"):
            _local.stack = []
        _local.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _local.stack.pop()

    def record(self, out: Tensor, inputs: tuple[Tensor, ...], backward: Callable) -> None:
        if self.consumed:
            raise TapeError("tape already consumed by backward; start a new tape")
        out.node = len(self.nodes)
        self.nodes.append(_Node(out, inputs, backward))

    def _relevant(self, wrt: Sequence[Tensor]) -> set[int]:
        """Ids of tensors through which gradient can reach any of ``wrt``."""
        live = {id(t) for t in wrt}
        for node in self.nodes:
            if any(id(t) in live for t in node.inputs):
                live.add(id(node.out))
        return live

    def _sweep(self, loss: Tensor, wrt: Sequence[Tensor] | None = None) -> Gradients:
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        live = None if wrt is None else self._relevant(wrt)
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        tensors: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self.nodes):
            g = grads.get(id(node.out))
            if g is None or tensors.get(id(node.out)) is not node.out:
                continue
            if live is None:
                need = tuple(t.requires_grad for t in node.inputs)
            else:
                need = tuple(t.requires_grad and id(t) in live for t in node.inputs)
            if not any(need):
                continue
            in_grads = node.backward(g, need)
            for t, gi, n in zip(node.inputs, in_grads, need):
                if gi is None or not n:
                    continue
                key = id(t)
                if key in grads and tensors[key] is t:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                    tensors[key] = t
        return Gradients(grads, tensors)

    def _consume(self) -> None:
        if self.consumed:
            raise TapeError("backward already ran on this tape")
        self.consumed = True

    def backward(self, loss: Tensor) -> Gradients:
        """Backpropagate ``loss`` and accumulate into ``.grad`` of leaf tensors."""
        self._consume()
        grads = self._sweep(loss)
        for key, t in grads._tensors.items():
            if t.node is None and t.requires_grad:
                g = grads._grads[key]
                t.grad = g.copy() if t.grad is None else t.grad + g
        return grads

    def backward_many(self, losses: Sequence[Tensor],
                      wrt: Sequence[Sequence[Tensor]] | None = None) -> list[Gradients]:
        """Independent sweeps for several losses over one forward record.

        ``wrt[i]``, when given, restricts sweep ``i`` to the part of the graph
        that can reach those tensors; gradients of anything else in that
        sweep are unspecified. Leaf ``.grad`` buffers are left untouched.
        """
        self._consume()
        if wrt is None:
            return [self._sweep(loss) for loss in losses]
        return [self._sweep(loss, w) for loss, w in zip(losses, wrt)]


def _emit(data: np.ndarray, inputs: tuple[Tensor, ...], backward: Callable) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.name = None
    tape = _active()
    needs = any(t.requires_grad for t in inputs)
    out.requires_grad = needs and tape is not None
    if out.requires_grad:
        tape.record(out, inputs, backward)
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


# --- linear algebra -----------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def back(g, need):
        return (g @ bd.T if need[0] else None, ad.T @ g if need[1] else None)

    return _emit(ad @ bd, (a, b), back)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """``x[i, :] + b`` for every row i."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: {x.shape} + {b.shape}")
    return _emit(x.data + b.data, (x, b), lambda g, need: (g, g.sum(axis=0)))


# --- binary elementwise -------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "add")
    return _emit(a.data + b.data, (a, b), lambda g, need: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "sub")
    return _emit(a.data - b.data, (a, b), lambda g, need: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g, need: (g * bd, g * ad))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit(a.data * c, (a,), lambda g, need: (g * c,))


# --- unary elementwise --------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit(np.where(mask, x.data, 0.0), (x,), lambda g, need: (g * mask,))


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    factor = np.where(x.data > 0, 1.0, slope)
    return _emit(x.data * factor, (x,), lambda g, need: (g * factor,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _emit(y, (x,), lambda g, need: (g * (1.0 - y * y),))


def _sigmoid(v: np.ndarray) -> np.ndarray:
    # two-branch form avoids overflow in exp for large |v|
    e = np.exp(-np.abs(v))
    return np.where(v >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _emit(y, (x,), lambda g, need: (g * y * (1.0 - y),))


def softplus(x: Tensor) -> Tensor:
    """``log(1 + exp(x))`` evaluated as ``max(x, 0) + log1p(exp(-|x|))``."""
    v = x.data
    y = np.maximum(v, 0.0) + np.log1p(np.exp(-np.abs(v)))
    return _emit(y, (x,), lambda g, need: (g * _sigmoid(v),))


def log_sigmoid(x: Tensor) -> Tensor:
    """``log(sigmoid(x))`` as ``-softplus(-x)``; finite for any finite x."""
    v = x.data
    y = -(np.maximum(-v, 0.0) + np.log1p(np.exp(-np.abs(v))))
    return _emit(y, (x,), lambda g, need: (g * _sigmoid(-v),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise DomainError("log of non-positive input")
    xd = x.data
    return _emit(np.log(xd), (x,), lambda g, need: (g / xd,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return _emit(xd * xd, (x,), lambda g, need: (2.0 * g * xd,))


# --- reductions and reshaping -------------------------------------------


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    shape = x.shape
    if axis is None:
        return _emit(np.asarray(x.data.sum()), (x,), lambda g, need: (np.broadcast_to(g, shape).copy(),))
    y = x.data.sum(axis=axis)
    return _emit(y, (x,), lambda g, need: (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),))


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit(x.data.reshape(shape), (x,), lambda g, need: (g.reshape(old),))


def rows(x: Tensor, start: int, stop: int) -> Tensor:
    """Row slice ``x[start:stop]``."""
    shape = x.shape

    def back(g, need):
        full = np.zeros(shape)
        full[start:stop] = g
        return (full,)

    return _emit(x.data[start:stop].copy(), (x,), back)


def concat_rows(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"concat_rows: {a.shape} vs {b.shape}")
    n = a.shape[0]
    return _emit(np.concatenate([a.data, b.data]), (a, b), lambda g, need: (g[:n], g[n:]))


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """``table[index]``; backward scatter-adds into the table rows."""
    index = np.asarray(index, dtype=np.intp)
    shape = table.shape

    def back(g, need):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return (full,)

    return _emit(table.data[index], (table,), back)


# --- gradient routing ---------------------------------------------------


def stop_gradient(x: Tensor) -> Tensor:
    """Forward identity that is never recorded, so nothing flows back into ``x``."""
    out = Tensor(x.data.copy())
    return out


def straight_through(quantized: Tensor, original: Tensor, copy: bool = True) -> Tensor:
    """Value of ``quantized`` with the identity gradient routed to ``original``.

    Equivalent to ``original + stop_gradient(quantized - original)`` but
    recorded as a single node, and the forward value is exactly
    ``quantized`` rather than a rounded sum. ``copy=False`` shares the
    quantized buffer, for callers that own it.
    """
    _same_shape(quantized, original, "straight_through")
    return _emit(quantized.data.copy() if copy else quantized.data, (original,), lambda g, need: (g,))


def parameters_zero_grad(params: Iterable[Tensor]) -> None:
    for p in params:
        p.grad = None
