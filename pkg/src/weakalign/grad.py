"""Minimal define-by-run reverse-mode autodiff over dense float64 arrays.

Every primitive computes its value with numpy and, when a :class:`Tape` is
active and any input requires gradients, records a vector-Jacobian closure on
that tape.  There is no implicit broadcasting: elementwise ops demand equal
shapes and :func:`expand` is the only way to tile a tensor.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

NEG_INF = -1e30

_local = threading.local()


class ShapeError(ValueError):
    pass


class _Partial:
    """Gradient that is nonzero only at ``index`` of the input (basic slicing)."""

    __slots__ = ("index", "grad")

    def __init__(self, index, grad):
        self.index = index
        self.grad = grad


class Tensor:
    __slots__ = ("value", "grad", "requires_grad", "name", "_node")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._node = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def item(self) -> float:
        return float(self.value.reshape(-1)[0]) if self.value.size == 1 else float("nan")

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def constant(value) -> Tensor:
    return Tensor(value)


class Tape:
    """Ordered record of operations executed while the tape is active.

    Use as a context manager; tapes are thread-local and may nest (the
    innermost one records).
    """

    def __init__(self):
        self.records: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: Tensor) -> dict[int, np.ndarray]:
        """Fill ``.grad`` on every tensor reachable backwards from ``loss``.

        Leaf gradients are overwritten, not accumulated across calls, so
        repeated calls on an unchanged tape give identical results.
        """
        if loss.value.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not self.records:
            raise ValueError("backward called on an empty tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
        owned: set[int] = set()
        for out, inputs, vjp in reversed(self.records):
            g = grads.get(id(out))
            if g is None:
                continue
            out.grad = g
            for inp, ig in zip(inputs, vjp(g)):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if isinstance(ig, _Partial):
                    if key not in owned:
                        buf = np.zeros(inp.shape) if key not in grads else grads[key].copy()
                        grads[key] = buf
                        owned.add(key)
                    grads[key][ig.index] += ig.grad
                elif key in grads:
                    if key in owned:
                        grads[key] += ig
                    else:
                        grads[key] = grads[key] + ig
                        owned.add(key)
                else:
                    grads[key] = ig
        for _, inputs, _ in self.records:
            for inp in inputs:
                if inp.requires_grad and inp._node is None:
                    inp.grad = grads.get(id(inp), np.zeros_like(inp.value))
        return grads


def _stack() -> list[Tape]:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def current_tape() -> Tape | None:
    st = _stack()
    return st[-1] if st else None


class no_grad:
    """Suspend recording (used by decoding and evaluation)."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()
        return self

    def __exit__(self, *exc):
        _stack().extend(self._saved)
        return False


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    tape = tape or current_tape()
    if tape is None:
        raise ValueError("no active tape")
    tape.backward(loss)


def _record(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    out = Tensor(value)
    tape = current_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._node = True
        tape.records.append((out, tuple(inputs), vjp))
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("add", a, b)
    return _record(a.value + b.value, (a, b), lambda g: (g, g))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("sub", a, b)
    return _record(a.value - b.value, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return _record(av * bv, (a, b), lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    return _record(a.value * c, (a,), lambda g: (g * c,))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.value)
    return _record(y, (a,), lambda g: (g * (1.0 - y * y),))


def sigmoid(a: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * a.value))
    return _record(y, (a,), lambda g: (g * y * (1.0 - y),))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.value)
    return _record(y, (a,), lambda g: (g * y,))


def log(a: Tensor) -> Tensor:
    x = a.value
    return _record(np.log(x), (a,), lambda g: (g / x,))


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``[..., M, K] @ [K, N]`` or batched ``[B, M, K] @ [B, K, N]``.

    The batched form needs identical leading dims; nothing is broadcast.
    """
    av, bv = a.value, b.value
    if av.ndim < 1 or bv.ndim < 2 or av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")
    if bv.ndim == 2:
        lead = av.shape[:-1]
        a2 = av.reshape(-1, av.shape[-1])
        out = (a2 @ bv).reshape(lead + (bv.shape[1],))

        def vjp(g):
            g2 = g.reshape(-1, bv.shape[1])
            return (g2 @ bv.T).reshape(av.shape), a2.T @ g2

        return _record(out, (a, b), vjp)
    if av.ndim != bv.ndim or av.shape[:-2] != bv.shape[:-2]:
        raise ShapeError(f"matmul: shape mismatch {a.shape} vs {b.shape}")

    def bvjp(g):
        return g @ np.swapaxes(bv, -1, -2), np.swapaxes(av, -1, -2) @ g

    return _record(av @ bv, (a, b), bvjp)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    src = a.shape
    return _record(a.value.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _record(np.transpose(a.value, axes), (a,), lambda g: (np.transpose(g, inv),))


def expand(a: Tensor, shape: Sequence[int]) -> Tensor:
    """Explicit tiling: size-1 (or missing leading) axes of ``a`` grow to ``shape``."""
    shape = tuple(shape)
    src = a.shape
    try:
        out = np.broadcast_to(a.value, shape).copy()
    except ValueError:
        raise ShapeError(f"expand: cannot tile {src} to {shape}") from None
    extra = len(shape) - len(src)
    summed = tuple(range(extra)) + tuple(
        i + extra for i, n in enumerate(src) if n == 1 and shape[i + extra] != 1
    )

    def vjp(g):
        return (g.sum(axis=summed, keepdims=True).reshape(src) if summed else g,)

    return _record(out, (a,), vjp)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    vals = [t.value for t in tensors]
    ax = axis % vals[0].ndim
    for v in vals[1:]:
        if v.ndim != vals[0].ndim or any(
            v.shape[i] != vals[0].shape[i] for i in range(v.ndim) if i != ax
        ):
            raise ShapeError(f"concat: shape mismatch {vals[0].shape} vs {v.shape}")
    splits = np.cumsum([v.shape[ax] for v in vals])[:-1]
    return _record(
        np.concatenate(vals, axis=ax), tuple(tensors), lambda g: tuple(np.split(g, splits, axis=ax))
    )


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    vals = [t.value for t in tensors]
    for v in vals[1:]:
        if v.shape != vals[0].shape:
            raise ShapeError(f"stack: shape mismatch {vals[0].shape} vs {v.shape}")
    out = np.stack(vals, axis=axis)
    ax = axis % out.ndim
    n = len(vals)

    def vjp(g):
        return tuple(np.take(g, i, axis=ax) for i in range(n))

    return _record(out, tuple(tensors), vjp)


def getitem(a: Tensor, index) -> Tensor:
    """Basic slicing/indexing; gradient scatters back into a zero buffer."""
    src = a.shape

    parts = index if isinstance(index, tuple) else (index,)
    advanced = any(isinstance(p, (list, np.ndarray)) for p in parts)

    def vjp(g):
        if not advanced:
            return (_Partial(index, g),)
        full = np.zeros(src)
        np.add.at(full, index, g)
        return (full,)

    return _record(a.value[index], (a,), vjp)


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis`` (embedding lookup is ``take(table, ids, 0)``)."""
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= a.shape[axis]):
        raise IndexError(f"take: index out of range for axis of size {a.shape[axis]}")
    ax = axis % a.ndim
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        moved = np.moveaxis(full, ax, 0)
        gm = np.moveaxis(g, tuple(range(ax, ax + idx.ndim)), tuple(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (full,)

    return _record(np.take(a.value, idx, axis=ax), (a,), vjp)


def take_along(a: Tensor, indices, axis: int) -> Tensor:
    """``np.take_along_axis``; indices must have ``a``'s rank."""
    idx = np.asarray(indices, dtype=np.int64)
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        grid = list(np.indices(idx.shape, sparse=True))
        grid[axis] = idx
        np.add.at(full, tuple(grid), g)
        return (full,)

    return _record(np.take_along_axis(a.value, idx, axis=axis), (a,), vjp)


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001
    src = a.shape
    out = a.value.sum(axis=axis)

    def vjp(g):
        if axis is None:
            return (np.full(src, float(g)),)
        return (np.broadcast_to(np.expand_dims(g, axis), src).copy(),)

    return _record(np.asarray(out), (a,), vjp)


def masked_sum(a: Tensor, mask, axis=None) -> Tensor:
    """Sum of ``a`` over positions where ``mask`` is 1; zero gradient elsewhere."""
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != a.shape:
        raise ShapeError(f"masked_sum: shape mismatch {a.shape} vs {m.shape}")
    return sum(mul(a, Tensor(m)), axis=axis)


def masked_mean(a: Tensor, mask, axis=None) -> Tensor:
    """Mean over valid positions; an all-masked slice yields 0."""
    m = np.asarray(mask, dtype=np.float64)
    count = np.maximum(m.sum(axis=axis), 1.0)
    total = masked_sum(a, m, axis=axis)
    return _record(total.value / count, (total,), lambda g: (g / count,))


# ---------------------------------------------------------------- normalisation


def log_softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    shifted = x - x.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    y = shifted - lse
    p = np.exp(y)

    def vjp(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _record(y, (a,), vjp)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.value
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), vjp)


def logsumexp(x: np.ndarray, axis=None) -> np.ndarray:
    """Plain numpy log-sum-exp, safe when every entry is the ``NEG_INF`` sentinel."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(m <= NEG_INF, 0.0, m)
    s = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    s = np.maximum(s, NEG_INF)
    return s.squeeze(axis) if axis is not None else s.reshape(())


# ---------------------------------------------------------------- misc


def dropout(a: Tensor, rate: float, rng: np.random.Generator | None) -> Tensor:
    if rate <= 0.0 or rng is None:
        return a
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return mul(a, Tensor(keep))


def custom(value: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    """Record an op whose forward and VJP were computed outside this module."""
    return _record(np.asarray(value, dtype=np.float64), inputs, vjp)
