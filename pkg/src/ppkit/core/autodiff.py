"""Reverse-mode differentiation over numpy arrays.

Operations executed while a :class:`GradientTape` is active are appended to
that tape; ``tape.gradient`` replays them backwards. Outside a tape every
operation is a plain numpy computation with no bookkeeping, which is what
inference uses.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

DEFAULT_DTYPE = np.float32

_state = threading.local()


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "GradientTape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """A thin wrapper around an ndarray that operations can be recorded on.

    Network data is rank 4 in ``(n, c, h, w)`` order; losses and dense layers
    also produce lower-rank tensors, so the rank is not enforced here.
    """

    __slots__ = ("data", "name", "__weakref__")

    def __init__(self, data, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else DEFAULT_DTYPE
        self.data = np.asarray(data, dtype=dtype)
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

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
        return neg(self)

    def __pow__(self, exponent):
        return power(self, exponent)


def tensor4(data, dtype=None, name: str | None = None) -> Tensor:
    """Build a rank-4 tensor, rejecting other ranks and zero-sized dims."""
    t = Tensor(data, dtype=dtype, name=name)
    if t.ndim != 4:
        raise ValueError(f"expected a rank-4 (n, c, h, w) array, got shape {t.shape}")
    if 0 in t.shape:
        raise ValueError(f"zero-sized dimension in shape {t.shape}")
    return t


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype or DEFAULT_DTYPE))


BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


class _Record:
    __slots__ = ("out", "inputs", "needs", "backward")

    def __init__(self, out, inputs, needs, backward):
        self.out = out
        self.inputs = inputs
        self.needs = needs
        self.backward = backward


class GradientTape:
    """Records operations between ``__enter__`` and ``__exit__``.

    Only operations that (transitively) depend on a watched tensor are kept,
    so constant sub-graphs such as data preprocessing cost nothing in the
    backward pass.
    """

    def __init__(self):
        self._records: list[_Record] = []
        self._live: set[int] = set()
        self._keep: list[Tensor] = []

    def __enter__(self) -> "GradientTape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("gradient tapes must be exited in LIFO order")
        stack.pop()

    def watch(self, *tensors: Tensor | Iterable[Tensor]) -> None:
        for t in tensors:
            if isinstance(t, Tensor):
                self._live.add(id(t))
                self._keep.append(t)
            else:
                self.watch(*t)

    def __len__(self) -> int:
        return len(self._records)

    def _record(self, out: Tensor, inputs: tuple, backward: BackwardFn) -> None:
        needs = tuple(id(t) in self._live for t in inputs)
        if any(needs):
            self._live.add(id(out))
            self._records.append(_Record(out, inputs, needs, backward))

    def gradient(self, loss: Tensor, sources):
        """Gradients of a scalar ``loss`` with respect to ``sources``.

        ``sources`` may be a mapping of name to tensor (a dict of arrays is
        returned) or a sequence (a list is returned). Sources the loss does not
        depend on receive exact zeros.
        """
        if loss.size != 1:
            raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        for rec in reversed(self._records):
            g = grads.get(id(rec.out))
            if g is None:
                continue
            in_grads = rec.backward(g, rec.needs)
            for inp, need, gi in zip(rec.inputs, rec.needs, in_grads):
                if not need or gi is None:
                    continue
                key = id(inp)
                prev = grads.get(key)
                grads[key] = gi if prev is None else prev + gi

        def lookup(t: Tensor) -> np.ndarray:
            g = grads.get(id(t))
            if g is None:
                return np.zeros_like(t.data)
            return np.asarray(g, dtype=t.dtype).reshape(t.shape)

        if isinstance(sources, Mapping):
            return {k: lookup(t) for k, t in sources.items()}
        return [lookup(t) for t in sources]


def make_result(data: np.ndarray, inputs: tuple, backward: BackwardFn) -> Tensor:
    """Wrap ``data`` as the output of an operation and record it if taping."""
    out = Tensor(data, dtype=data.dtype)
    tape = active_tape()
    if tape is not None:
        tape._record(out, inputs, backward)
    return out


def backward(tape: GradientTape, loss: Tensor, sources):
    return tape.gradient(loss, sources)


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, like=a)
    b = as_tensor(b)
    return as_tensor(a, like=b), b


def add(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(g, b.shape) if needs[1] else None)

    return make_result(a.data + b.data, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g, needs):
        return (_unbroadcast(g, a.shape) if needs[0] else None,
                _unbroadcast(-g, b.shape) if needs[1] else None)

    return make_result(a.data - b.data, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)

    def bw(g, needs):
        return (_unbroadcast(g * b.data, a.shape) if needs[0] else None,
                _unbroadcast(g * a.data, b.shape) if needs[1] else None)

    return make_result(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    out = a.data / b.data

    def bw(g, needs):
        return (_unbroadcast(g / b.data, a.shape) if needs[0] else None,
                _unbroadcast(-g * out / b.data, b.shape) if needs[1] else None)

    return make_result(out, (a, b), bw)


def neg(a: Tensor) -> Tensor:
    return make_result(-a.data, (a,), lambda g, needs: (-g,))


def power(a: Tensor, exponent: float) -> Tensor:
    """Elementwise ``a ** exponent`` for a constant real exponent."""
    p = float(exponent)

    def bw(g, needs):
        return (g * p * a.data ** (p - 1.0),)

    return make_result(a.data ** p, (a,), bw)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g, needs: (g * out,))


def log(a: Tensor) -> Tensor:
    return make_result(np.log(a.data), (a,), lambda g, needs: (g / a.data,))


def absolute(a: Tensor) -> Tensor:
    return make_result(np.abs(a.data), (a,), lambda g, needs: (g * np.sign(a.data),))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    """``max(a, floor)``; the gradient is zero where the floor is active."""
    mask = a.data > floor
    out = np.where(mask, a.data, np.asarray(floor, dtype=a.dtype))
    return make_result(out, (a,), lambda g, needs: (g * mask,))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return make_result(out, (a,), lambda g, needs: (g * (1.0 - out * out),))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # Two branches keep exp() from overflowing at either tail.
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return make_result(out, (a,), lambda g, needs: (g * out * (1.0 - out),))


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    pos = a.data >= 0
    factor = np.where(pos, 1.0, slope).astype(a.dtype)
    return make_result(a.data * factor, (a,), lambda g, needs: (g * factor,))


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(np.asarray(out), (a,), bw)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = np.mean(a.data, axis=axis, keepdims=keepdims)
    count = a.size // max(np.asarray(out).size, 1)

    def bw(g, needs):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, a.shape).astype(a.dtype),)

    return make_result(np.asarray(out, dtype=a.dtype), (a,), bw)


def reshape(a: Tensor, shape: tuple) -> Tensor:
    return make_result(a.data.reshape(shape), (a,), lambda g, needs: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; constants and live tensors may be mixed."""
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ValueError("concat needs at least one tensor")
    bounds = np.cumsum([0] + [t.shape[axis] for t in ts])

    def bw(g, needs):
        return tuple(np.take(g, np.arange(lo, hi), axis=axis) if need else None
                     for lo, hi, need in zip(bounds[:-1], bounds[1:], needs))

    return make_result(np.concatenate([t.data for t in ts], axis=axis), tuple(ts), bw)


def take_rows(a: Tensor, start: int, stop: int) -> Tensor:
    """``a[start:stop]`` along the first axis."""
    def bw(g, needs):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return make_result(a.data[start:stop], (a,), bw)
