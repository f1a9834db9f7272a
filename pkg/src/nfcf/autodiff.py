"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive operation applied to :class:`Tensor`
objects while it is active. Calling :meth:`Tape.backward` on a scalar loss
replays the recorded operations in reverse creation order (creation order is
topological by construction) and accumulates vector-Jacobian products into a
gradient map. Without an active tape the same functions run forward-only,
which is the fast path used during evaluation.

The op set is deliberately small: exactly what embedding tables plus a tower
MLP plus the fairness penalties need. No control-flow capture, no higher-order
gradients, no sparse arrays.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

Array = np.ndarray

_active_tape: "Tape | None" = None


def _as_array(values) -> Array:
    out = np.asarray(values, dtype=np.float64)
    return out


class Tensor:
    """A float64 array plus bookkeeping for the tape."""

    __slots__ = ("data", "requires_grad", "name", "_recorded")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._recorded = False  # set when this tensor is the output of a taped op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    # arithmetic sugar; all routed through the module-level ops
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

    def __abs__(self):
        return absolute(self)


def astensor(value) -> Tensor:
    """Wrap a value as a constant Tensor; Tensors pass through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Node:
    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out: Tensor, parents: tuple[Tensor, ...], vjp: Callable[[Array], tuple]):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Ordered record of primitive operations, used as a context manager."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __len__(self) -> int:
        return len(self._nodes)

    def __enter__(self) -> "Tape":
        global _active_tape
        if _active_tape is not None:
            raise ContractError("nested tapes are not supported")
        _active_tape = self
        return self

    def __exit__(self, *exc) -> None:
        global _active_tape
        _active_tape = None
        # outputs reused under a later tape behave like constants again
        for node in self._nodes:
            node.out._recorded = False

    def backward(self, loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, Array]:
        """Gradient of a scalar loss w.r.t. every reachable tensor.

        Returns a map keyed by Tensor identity. When ``params`` is given the
        map contains an entry for each of them, zero-filled for parameters the
        loss does not depend on.
        """
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.data.shape}")
        grads: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        by_id: dict[int, Tensor] = {id(loss): loss}
        for node in reversed(self._nodes):
            gout = grads.get(id(node.out))
            if gout is None:
                continue
            pgrads = node.vjp(gout)
            for parent, pg in zip(node.parents, pgrads):
                if pg is None or not (parent.requires_grad or parent._recorded):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] += pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64, copy=True)
                    by_id[key] = parent
        out: dict[Tensor, Array] = {
            by_id[k]: g for k, g in grads.items() if by_id[k].requires_grad
        }
        if params is not None:
            for p in params:
                if p not in out:
                    out[p] = np.zeros_like(p.data)
        return out


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, Array]:
    """Convenience wrapper: run backward on the currently active tape."""
    if _active_tape is None:
        raise ContractError("backward() called with no active tape")
    return _active_tape.backward(loss, params)


def _record(out: Tensor, parents: tuple[Tensor, ...], vjp: Callable[[Array], tuple]) -> Tensor:
    tape = _active_tape
    if tape is not None and any(p.requires_grad or p._recorded for p in parents):
        out._recorded = True
        tape._nodes.append(_Node(out, parents, vjp))
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcasted gradient back down to ``shape``."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic (numpy broadcasting rules)

def add(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data + b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)))


def sub(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data - b.data)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)))


def mul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data * b.data)
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)),
    )


def div(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    out = Tensor(a.data / b.data)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.data.shape),
            _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape),
        ),
    )


def log(a) -> Tensor:
    a = astensor(a)
    out = Tensor(np.log(a.data))
    return _record(out, (a,), lambda g: (g / a.data,))


def absolute(a) -> Tensor:
    a = astensor(a)
    out = Tensor(np.abs(a.data))
    return _record(out, (a,), lambda g: (g * np.sign(a.data),))


def maximum(a, b) -> Tensor:
    """Elementwise max; on ties the gradient goes to the first operand."""
    a, b = astensor(a), astensor(b)
    out = Tensor(np.maximum(a.data, b.data))
    take_a = a.data >= b.data
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g * take_a, a.data.shape), _unbroadcast(g * ~take_a, b.data.shape)),
    )


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to [lo, hi]; gradient is zero where the clamp engaged."""
    a = astensor(a)
    out = Tensor(np.clip(a.data, lo, hi))
    inside = (a.data > lo) & (a.data < hi)
    return _record(out, (a,), lambda g: (g * inside,))


# ---------------------------------------------------------------------------
# activations

def relu(a) -> Tensor:
    a = astensor(a)
    out = Tensor(np.maximum(a.data, 0.0))
    positive = a.data > 0.0
    return _record(out, (a,), lambda g: (g * positive,))


_SIG_LO = np.nextafter(0.0, 1.0)
_SIG_HI = np.nextafter(1.0, 0.0)


def sigmoid(a) -> Tensor:
    a = astensor(a)
    # tanh form is overflow-free across the whole float64 range; saturated
    # values are nudged to the nearest representable interior point so the
    # output stays strictly inside (0, 1)
    s = np.clip(0.5 * (1.0 + np.tanh(0.5 * a.data)), _SIG_LO, _SIG_HI)
    out = Tensor(s)
    return _record(out, (a,), lambda g: (g * s * (1.0 - s),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = astensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = Tensor(shifted - lse)
    softmax = np.exp(out.data)

    def vjp(g):
        return (g - softmax * g.sum(axis=axis, keepdims=True),)

    return _record(out, (a,), vjp)


# ---------------------------------------------------------------------------
# linear algebra and structure

def matmul(a, b) -> Tensor:
    a, b = astensor(a), astensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.data.shape} and {b.data.shape}")
    out = Tensor(a.data @ b.data)
    return _record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def affine(x, weight, bias) -> Tensor:
    """Dense layer: rows of ``x`` times ``weight`` plus a broadcast ``bias``.

    ``x`` is (batch, fan_in), ``weight`` is (fan_in, fan_out), ``bias`` is
    (fan_out,). Equivalent to applying W^T to each input column vector.
    """
    x, weight, bias = astensor(x), astensor(weight), astensor(bias)
    xd = x.data if x.data.ndim == 2 else x.data.reshape(1, -1)
    if weight.data.ndim != 2 or xd.shape[1] != weight.data.shape[0]:
        raise ShapeError(
            f"affine: input shape {x.data.shape} does not match weight shape {weight.data.shape}"
        )
    bd = bias.data.reshape(-1)
    if bd.shape[0] != weight.data.shape[1]:
        raise ShapeError(
            f"affine: bias shape {bias.data.shape} does not match weight shape {weight.data.shape}"
        )
    out = Tensor(xd @ weight.data + bd)
    if x.data.ndim == 1:
        out.data = out.data.reshape(-1)

    def vjp(g):
        g2 = g.reshape(-1, weight.data.shape[1])
        gx = g2 @ weight.data.T
        return (gx.reshape(x.data.shape), xd.T @ g2, _unbroadcast(g2, (1, bd.shape[0])).reshape(bias.data.shape))

    return _record(out, (x, weight, bias), vjp)


def concat(a, b) -> Tensor:
    """Column-wise concatenation; the gradient splits back to the operands."""
    a, b = astensor(a), astensor(b)
    if a.data.ndim != b.data.ndim or a.data.ndim not in (1, 2):
        raise ShapeError(f"concat: rank mismatch {a.data.shape} vs {b.data.shape}")
    if a.data.ndim == 2 and a.data.shape[0] != b.data.shape[0]:
        raise ShapeError(f"concat: batch mismatch {a.data.shape} vs {b.data.shape}")
    axis = a.data.ndim - 1
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    na = a.data.shape[axis]

    def vjp(g):
        if axis == 0:
            return (g[:na], g[na:])
        return (g[:, :na], g[:, na:])

    return _record(out, (a, b), vjp)


def gather_rows(table, index) -> Tensor:
    """Row lookup ``table[index]``; scatter-adds the gradient back."""
    table = astensor(table)
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.data.shape[0]):
        raise ContractError(
            f"gather_rows: index out of range for table with {table.data.shape[0]} rows"
        )
    out = Tensor(table.data[idx])

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _record(out, (table,), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = astensor(a)
    out = Tensor(a.data.reshape(shape))
    return _record(out, (a,), lambda g: (g.reshape(a.data.shape),))


def sum_(a, axis: int | None = None) -> Tensor:
    a = astensor(a)
    out = Tensor(a.data.sum(axis=axis))

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.data.shape).copy(),)

    return _record(out, (a,), vjp)


def mean_(a) -> Tensor:
    a = astensor(a)
    out = Tensor(a.data.mean())
    n = a.data.size
    return _record(out, (a,), lambda g: (np.broadcast_to(g / n, a.data.shape).copy(),))


def value_of(t: Tensor | float) -> float:
    """Scalar payload of a tensor or plain number."""
    if isinstance(t, Tensor):
        return t.item()
    return float(t)
