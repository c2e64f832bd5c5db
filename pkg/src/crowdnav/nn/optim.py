"""Adam optimizer and the CKPT parameter file format."""

from __future__ import annotations

import struct
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

from .tensor import Param

CKPT_MAGIC = b"CKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def adam_step(
    params: Iterable[Param], lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8
) -> None:
    """Bias-corrected Adam update; gradients are zeroed afterwards."""
    for p in params:
        g = p.grad
        p.step += 1
        p.adam_m = beta1 * p.adam_m + (1.0 - beta1) * g
        p.adam_v = beta2 * p.adam_v + (1.0 - beta2) * g * g
        m_hat = p.adam_m / (1.0 - beta1 ** p.step)
        v_hat = p.adam_v / (1.0 - beta2 ** p.step)
        p.data = (p.data - lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.data.dtype)
        p.zero_grad()


def checkpoint_bytes(params: Sequence[Param]) -> bytes:
    names = [p.name for p in params]
    if len(set(names)) != len(names):
        raise CheckpointError("parameter names are not unique")
    parts = [struct.pack("<4sII", CKPT_MAGIC, CKPT_VERSION, len(params))]
    for p in params:
        name = p.name.encode("utf-8")
        parts.append(struct.pack("<H", len(name)) + name)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def save_checkpoint(target: str | Path | BinaryIO, params: Sequence[Param]) -> None:
    payload = checkpoint_bytes(params)
    if isinstance(target, (str, Path)):
        Path(target).write_bytes(payload)
    else:
        target.write(payload)


def read_checkpoint(source: str | Path | BinaryIO | bytes) -> dict[str, np.ndarray]:
    if isinstance(source, bytes):
        raw = source
    elif isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
    else:
        raw = source.read()
    try:
        magic, version, count = struct.unpack_from("<4sII", raw, 0)
        if magic != CKPT_MAGIC:
            raise CheckpointError(f"bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        out: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<B", raw, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", raw, off)
            off += 4 * rank
            size = int(np.prod(dims)) if rank else 1
            arr = np.frombuffer(raw, dtype="<f4", count=size, offset=off).reshape(dims)
            off += 4 * size
            out[name] = arr.copy()
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    except ValueError as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"corrupt checkpoint: {exc}") from None
    if off != len(raw):
        raise CheckpointError("trailing bytes after checkpoint payload")
    return out


def load_checkpoint(source, params: Sequence[Param]) -> None:
    """Copy stored values into ``params``; unknown names or shape mismatches are errors."""
    stored = read_checkpoint(source)
    by_name = {p.name: p for p in params}
    unknown = sorted(set(stored) - set(by_name))
    if unknown:
        raise CheckpointError(f"checkpoint has unknown parameters: {', '.join(unknown)}")
    missing = sorted(set(by_name) - set(stored))
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {', '.join(missing)}")
    for name, arr in stored.items():
        p = by_name[name]
        if arr.shape != p.shape:
            raise CheckpointError(f"shape mismatch for {name}: stored {arr.shape}, model {p.shape}")
    for name, arr in stored.items():
        p = by_name[name]
        p.data = arr.astype(p.data.dtype)
        p.zero_grad()
