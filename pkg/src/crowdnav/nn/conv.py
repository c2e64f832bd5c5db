"""Convolution operators and the convolutional LSTM cell.

Tensors are batch-first ``[N, C, H, W]``; 3-D inputs ``[C, H, W]`` are
accepted and returned unbatched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Param, Tensor, _record, add, concat, mul, reshape, sigmoid, tanh


def _im2col(x: np.ndarray, k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """[N, C, H, W] -> [C*K*K, N*Ho*Wo] so a convolution is one matrix product."""
    n, c = x.shape[:2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
    xp = xp.transpose(1, 0, 2, 3)
    cols = np.empty((c, k, k, n, ho, wo), dtype=x.dtype)
    for ky in range(k):
        for kx in range(k):
            cols[:, ky, kx] = xp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride]
    return cols.reshape(c * k * k, n * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple[int, ...], k: int, stride: int, pad: int, ho: int, wo: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`: scatter-add columns back to [N, C, H, W]."""
    n, c, h, w = shape
    xp = np.zeros((c, n, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    cols = cols.reshape(c, k, k, n, ho, wo)
    for ky in range(k):
        for kx in range(k):
            xp[:, :, ky:ky + stride * ho:stride, kx:kx + stride * wo:stride] += cols[:, ky, kx]
    xp = xp.transpose(1, 0, 2, 3)
    return xp[:, :, pad:pad + h, pad:pad + w] if pad else xp


def _to_rows(a: np.ndarray) -> np.ndarray:
    """[N, C, H, W] -> [C, N*H*W]."""
    return a.transpose(1, 0, 2, 3).reshape(a.shape[1], -1)


def _from_rows(a: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(a.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ValueError(f"expected a [N, C, H, W] or [C, H, W] tensor, got shape {x.shape}")
    return x, False


def _unbatch(y: Tensor, squeeze: bool) -> Tensor:
    return reshape(y, y.shape[1:]) if squeeze else y


def conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int | None = None) -> Tensor:
    """Zero-padded cross-correlation.

    ``w`` is ``[Cout, Cin, K, K]``; padding defaults to ``(K - 1) // 2`` so a
    3x3 kernel at stride 1 keeps the spatial size.
    """
    x, squeeze = _batched(x)
    cout, cin, k, k2 = w.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    n, c, h, wd = x.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    if h % stride or wd % stride:
        raise ValueError(f"spatial size {h}x{wd} is not divisible by stride {stride}")
    pad = (k - 1) // 2 if padding is None else padding
    ho, wo = conv_out_size(h, k, stride, pad), conv_out_size(wd, k, stride, pad)
    if b is not None and b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} does not match {cout} output channels")

    cols = _im2col(x.data, k, stride, pad, ho, wo)
    w2 = w.data.reshape(cout, -1)
    y = w2 @ cols
    if b is not None:
        y += b.data[:, None]
    out = Tensor(_from_rows(y, n, ho, wo))
    xshape = x.shape
    need_x = x.requires_grad

    def fn(g):
        g2 = _to_rows(g)
        dw = (g2 @ cols.T).reshape(w.shape)
        dx = _col2im(w2.T @ g2, xshape, k, stride, pad, ho, wo) if need_x else None
        db = g2.sum(axis=1) if b is not None else None
        return dx, dw, db

    return _unbatch(_record(out, (x, w, b), fn), squeeze)


def conv2d_backward_input(g: np.ndarray, w: np.ndarray, input_shape: tuple[int, ...], stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`conv2d` with respect to its input, on raw arrays."""
    cout, _, k, _ = w.shape
    n, _, h, wd = input_shape
    ho, wo = conv_out_size(h, k, stride, padding), conv_out_size(wd, k, stride, padding)
    return _col2im(w.reshape(cout, -1).T @ _to_rows(g), input_shape, k, stride, padding, ho, wo)


def conv_transpose2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 2, padding: int = 1) -> Tensor:
    """Transposed convolution: the input-gradient of conv2d run forward.

    ``w`` is ``[Cin, Cout, K, K]``. With K=4, stride 2, padding 1 the output
    is exactly twice the input size.
    """
    x, squeeze = _batched(x)
    cin, cout, k, k2 = w.shape
    if k != k2:
        raise ValueError("only square kernels are supported")
    n, c, h, wd = x.shape
    if c != cin:
        raise ValueError(f"input has {c} channels, kernel expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ValueError(f"bias shape {b.shape} does not match {cout} output channels")
    ho, wo = (h - 1) * stride - 2 * padding + k, (wd - 1) * stride - 2 * padding + k
    if conv_out_size(ho, k, stride, padding) != h or conv_out_size(wo, k, stride, padding) != wd:
        raise ValueError("transposed convolution geometry is not invertible for this input size")
    oshape = (n, cout, ho, wo)

    w2 = w.data.reshape(cin, -1)
    x2 = _to_rows(x.data)
    y = _col2im(w2.T @ x2, oshape, k, stride, padding, h, wd)
    if b is not None:
        y += b.data[:, None, None]
    out = Tensor(np.ascontiguousarray(y))
    need_x = x.requires_grad

    def fn(g):
        gcols = _im2col(g, k, stride, padding, h, wd)
        dx = _from_rows(w2 @ gcols, n, h, wd) if need_x else None
        dw = (x2 @ gcols.T).reshape(w.shape)
        db = g.sum(axis=(0, 2, 3)) if b is not None else None
        return dx, dw, db

    return _unbatch(_record(out, (x, w, b), fn), squeeze)


# --------------------------------------------------------------------------
# ConvLSTM


@dataclass
class ConvLSTMState:
    h: Tensor
    c: Tensor

    def __post_init__(self):
        if self.h.shape != self.c.shape:
            raise ValueError(f"hidden {self.h.shape} and cell {self.c.shape} shapes differ")

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int, dtype=np.float32) -> "ConvLSTMState":
        shape = (batch, channels, height, width)
        return cls(Tensor(np.zeros(shape, dtype=dtype)), Tensor(np.zeros(shape, dtype=dtype)))


@dataclass
class ConvLSTMParams:
    """Gate convolution over ``concat(x, h)`` producing (i, f, g, o) stacked on channels."""

    weight: Param
    bias: Param

    @property
    def hidden(self) -> int:
        return self.weight.shape[0] // 4

    @classmethod
    def init(cls, name: str, in_channels: int, hidden: int, rng: np.random.Generator, dtype=None) -> "ConvLSTMParams":
        fan_in = (in_channels + hidden) * 9
        bound = np.sqrt(1.0 / fan_in)
        w = rng.uniform(-bound, bound, size=(4 * hidden, in_channels + hidden, 3, 3))
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        return cls(Param(f"{name}.weight", w, dtype), Param(f"{name}.bias", b, dtype))

    def params(self) -> list[Param]:
        return [self.weight, self.bias]


def convlstm_step(x: Tensor, state: ConvLSTMState, params: ConvLSTMParams) -> ConvLSTMState:
    """One ConvLSTM update without peephole terms.

    i, f, o = sigmoid(.), g = tanh(.) of a 3x3 convolution over [x, h];
    c' = f * c + i * g and h' = o * tanh(c').
    """
    x, squeeze = _batched(x)
    h, _ = _batched(state.h)
    c, _ = _batched(state.c)
    hid = params.hidden
    if h.shape[1] != hid or h.shape[2:] != x.shape[2:] or h.shape[0] != x.shape[0]:
        raise ValueError(f"state shape {h.shape} is inconsistent with input {x.shape} and hidden size {hid}")
    gates = conv2d(concat([x, h], axis=1), params.weight, params.bias, stride=1, padding=1)
    i = sigmoid(gates[:, 0:hid])
    f = sigmoid(gates[:, hid:2 * hid])
    g = tanh(gates[:, 2 * hid:3 * hid])
    o = sigmoid(gates[:, 3 * hid:4 * hid])
    c_new = add(mul(f, c), mul(i, g))
    h_new = mul(o, tanh(c_new))
    return ConvLSTMState(_unbatch(h_new, squeeze), _unbatch(c_new, squeeze))
