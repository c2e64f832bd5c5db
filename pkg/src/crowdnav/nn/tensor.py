"""Dense tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`Tape` is active are recorded together
with a closure that maps the output gradient to input gradients. Backward
replays the records in exact reverse order. Outside a tape, operations are
plain numpy and cost nothing extra.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

_default_dtype = np.dtype(np.float32)
_tapes: list["Tape"] = []


def default_dtype() -> np.dtype:
    return _default_dtype


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters."""
    global _default_dtype
    prev = _default_dtype
    _default_dtype = np.dtype(dtype)
    try:
        yield
    finally:
        _default_dtype = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if dtype is None and arr.dtype.kind != "f":
            arr = arr.astype(_default_dtype)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return mul(self, 1.0 / other)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        return reshape(self, shape[0] if len(shape) == 1 and isinstance(shape[0], tuple) else shape)


class Param(Tensor):
    """Trainable tensor with Adam moment buffers."""

    __slots__ = ("name", "adam_m", "adam_v", "step")

    def __init__(self, name: str, data, dtype=None):
        super().__init__(np.array(data, dtype=dtype or _default_dtype), requires_grad=True)
        self.name = name
        self.grad = np.zeros_like(self.data)
        self.adam_m = np.zeros_like(self.data)
        self.adam_v = np.zeros_like(self.data)
        self.step = 0

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.adam_m = self.adam_m.astype(dtype)
        self.adam_v = self.adam_v.astype(dtype)

    def __repr__(self) -> str:
        return f"Param({self.name!r}, shape={self.shape})"


class Tape:
    """Ordered record of differentiable operations."""

    def __init__(self):
        self.records: list[tuple[Tensor, tuple, Callable]] = []

    def __enter__(self) -> "Tape":
        _tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``."""
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        for out, _, _ in self.records:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, parents, fn in reversed(self.records):
            if out.grad is None:
                continue
            grads = fn(out.grad)
            for p, g in zip(parents, grads):
                if g is None or not isinstance(p, Tensor) or not p.requires_grad:
                    continue
                if p.grad is None:
                    p.grad = np.array(g, dtype=p.data.dtype, copy=True)
                else:
                    p.grad = p.grad + g
        self.records.clear()


def backward(loss: Tensor, params: Iterable[Param] = (), tape: Tape | None = None) -> None:
    """Set ``param.grad = d(loss)/d(param)``; params not reached get zeros."""
    tape = tape if tape is not None else (_tapes[-1] if _tapes else None)
    if tape is None:
        raise RuntimeError("backward called without a recording tape")
    for p in params:
        p.zero_grad()
    tape.backward(loss)


def _record(out: Tensor, parents: Sequence, fn: Callable) -> Tensor:
    if _tapes and any(isinstance(p, Tensor) and p.requires_grad for p in parents):
        out.requires_grad = True
        _tapes[-1].records.append((out, tuple(parents), fn))
    return out


def _needs_grad(x) -> bool:
    return isinstance(x, Tensor) and x.requires_grad


def _data(x):
    return x.data if isinstance(x, Tensor) else x


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=_default_dtype))


# --------------------------------------------------------------------------
# elementwise and structural ops


def add(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = Tensor(ad + bd)
    sa, sb = np.shape(ad), np.shape(bd)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = Tensor(ad - bd)
    sa, sb = np.shape(ad), np.shape(bd)
    return _record(out, (a, b), lambda g: (_unbroadcast(g, sa), -_unbroadcast(g, sb)))


def mul(a, b) -> Tensor:
    ad, bd = _data(a), _data(b)
    out = Tensor(ad * bd)
    sa, sb = np.shape(ad), np.shape(bd)
    need_a, need_b = _needs_grad(a), _needs_grad(b)
    return _record(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g * bd, sa) if need_a else None,
            _unbroadcast(g * ad, sb) if need_b else None,
        ),
    )


def tsum(x: Tensor, axis=None) -> Tensor:
    out = Tensor(np.sum(x.data, axis=axis))
    shape = x.shape

    def fn(g):
        if axis is None:
            return (np.broadcast_to(g, shape),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape),)

    return _record(out, (x,), fn)


def reshape(x: Tensor, shape) -> Tensor:
    out = Tensor(x.data.reshape(shape))
    orig = x.shape
    return _record(out, (x,), lambda g: (g.reshape(orig),))


def getitem(x: Tensor, index) -> Tensor:
    out = Tensor(x.data[index])
    shape, dtype = x.shape, x.dtype

    def fn(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _record(out, (x,), fn)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.concatenate([_data(x) for x in xs], axis=axis))
    bounds = np.cumsum([0] + [np.shape(_data(x))[axis] for x in xs])

    def fn(g):
        return tuple(np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=axis) for i in range(len(xs)))

    return _record(out, tuple(xs), fn)


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    out = Tensor(np.stack([_data(x) for x in xs], axis=axis))
    n = len(xs)
    return _record(out, tuple(xs), lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def sigmoid(x: Tensor) -> Tensor:
    s = 0.5 * (np.tanh(0.5 * x.data) + 1.0)
    out = Tensor(s)
    return _record(out, (x,), lambda g: (g * s * (1.0 - s),))


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    out = Tensor(t)
    return _record(out, (x,), lambda g: (g * (1.0 - t * t),))


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    out = Tensor(np.where(pos, x.data, slope * x.data))
    return _record(out, (x,), lambda g: (np.where(pos, g, slope * g),))


def softplus(x: Tensor) -> Tensor:
    d = x.data
    out = Tensor(np.logaddexp(0.0, d).astype(d.dtype))
    s = 0.5 * (np.tanh(0.5 * d) + 1.0)
    return _record(out, (x,), lambda g: (g * s,))


def huber(x: Tensor, delta: float = 1.0) -> Tensor:
    """Smooth L1: 0.5 e^2 / delta for |e| < delta, |e| - 0.5 delta otherwise."""
    d = x.data
    a = np.abs(d)
    small = a < delta
    out = Tensor(np.where(small, 0.5 * d * d / delta, a - 0.5 * delta))
    return _record(out, (x,), lambda g: (g * np.where(small, d / delta, np.sign(d)),))
