"""Macroscopic crowd fields on a regular grid.

A frame stores four channels per cell: density ``rho`` (pedestrians/m^2),
mean velocity ``(vx, vy)`` and isotropic velocity variance ``sigma2``.
Cell ``(row, col)`` has its center at
``origin + ((col + 0.5) * cell_size, (row + 0.5) * cell_size)``; x runs along
columns and y along rows.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO, Iterable, Sequence

import numpy as np

RHO, VX, VY, SIGMA2 = 0, 1, 2, 3
N_CHANNELS = 4

CFLD_MAGIC = b"CFLD"
CFLD_VERSION = 1


class FieldError(ValueError):
    """Invalid field data or an out-of-domain query."""


class OutOfDomainError(FieldError):
    pass


@dataclass(frozen=True)
class GridSpec:
    origin: tuple[float, float] = (0.0, 0.0)
    cell_size: float = 1.0
    height: int = 12
    width: int = 36
    frame_dt: float = 1.0

    def __post_init__(self):
        if not self.cell_size > 0:
            raise FieldError(f"cell_size must be positive, got {self.cell_size}")
        if self.height < 1 or self.width < 1:
            raise FieldError(f"grid must be at least 1x1, got {self.height}x{self.width}")
        if not self.frame_dt > 0:
            raise FieldError(f"frame_dt must be positive, got {self.frame_dt}")
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return self.height, self.width

    @property
    def cell_area(self) -> float:
        return self.cell_size * self.cell_size

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) in meters."""
        x0, y0 = self.origin
        return x0, y0, x0 + self.width * self.cell_size, y0 + self.height * self.cell_size

    def contains(self, pos) -> np.ndarray | bool:
        p = np.asarray(pos, dtype=float)
        xmin, ymin, xmax, ymax = self.bounds
        inside = (p[..., 0] >= xmin) & (p[..., 0] <= xmax) & (p[..., 1] >= ymin) & (p[..., 1] <= ymax)
        return bool(inside) if inside.ndim == 0 else inside

    def cell_center(self, row: int, col: int) -> np.ndarray:
        x0, y0 = self.origin
        return np.array([x0 + (col + 0.5) * self.cell_size, y0 + (row + 0.5) * self.cell_size])

    def cell_centers(self) -> np.ndarray:
        """Array [H, W, 2] of cell-center coordinates."""
        x0, y0 = self.origin
        xs = x0 + (np.arange(self.width) + 0.5) * self.cell_size
        ys = y0 + (np.arange(self.height) + 0.5) * self.cell_size
        gx, gy = np.meshgrid(xs, ys)
        return np.stack([gx, gy], axis=-1)


@dataclass(frozen=True)
class CellState:
    rho: float
    mu_v: tuple[float, float]
    sigma2_v: float

    @classmethod
    def from_array(cls, values) -> "CellState":
        v = np.asarray(values, dtype=float)
        return cls(float(v[RHO]), (float(v[VX]), float(v[VY])), float(v[SIGMA2]))


@dataclass(frozen=True)
class PedObservation:
    time: float
    pid: int
    pos: tuple[float, float]
    vel: tuple[float, float]


@dataclass
class Trajectory:
    """Time-ordered samples of one pedestrian, stored column-wise."""

    pid: int
    t: np.ndarray
    pos: np.ndarray
    vel: np.ndarray

    def __post_init__(self):
        self.t = np.asarray(self.t, dtype=float).reshape(-1)
        self.pos = np.asarray(self.pos, dtype=float).reshape(-1, 2)
        self.vel = np.asarray(self.vel, dtype=float).reshape(-1, 2)
        if not (len(self.t) == len(self.pos) == len(self.vel)):
            raise FieldError(f"trajectory {self.pid}: column lengths differ")

    def __len__(self) -> int:
        return len(self.t)

    @property
    def samples(self) -> list[PedObservation]:
        return [
            PedObservation(float(t), self.pid, (float(p[0]), float(p[1])), (float(v[0]), float(v[1])))
            for t, p, v in zip(self.t, self.pos, self.vel)
        ]

    @classmethod
    def from_samples(cls, pid: int, samples: Sequence[PedObservation]) -> "Trajectory":
        return cls(
            pid,
            np.array([s.time for s in samples], dtype=float),
            np.array([s.pos for s in samples], dtype=float).reshape(-1, 2),
            np.array([s.vel for s in samples], dtype=float).reshape(-1, 2),
        )

    def sorted(self) -> "Trajectory":
        order = np.argsort(self.t, kind="stable")
        return Trajectory(self.pid, self.t[order], self.pos[order], self.vel[order])


def _check_cell_values(data: np.ndarray) -> None:
    if not np.all(np.isfinite(data)):
        raise FieldError("field contains non-finite values")
    if np.any(data[..., RHO] < 0) or np.any(data[..., SIGMA2] < 0):
        raise FieldError("density and variance must be non-negative")


@dataclass(frozen=True)
class CrowdField:
    """One frame: ``data`` has shape [H, W, 4] with channels (rho, vx, vy, sigma2)."""

    spec: GridSpec
    data: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.shape != (self.spec.height, self.spec.width, N_CHANNELS):
            raise FieldError(f"frame shape {data.shape} does not match grid {self.spec.shape}")
        _check_cell_values(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def rho(self) -> np.ndarray:
        return self.data[..., RHO]

    @property
    def mu_v(self) -> np.ndarray:
        return self.data[..., VX:VY + 1]

    @property
    def sigma2_v(self) -> np.ndarray:
        return self.data[..., SIGMA2]

    def cell(self, row: int, col: int) -> CellState:
        return CellState.from_array(self.data[row, col])

    @classmethod
    def empty(cls, spec: GridSpec, frame_index: int = 0) -> "CrowdField":
        return cls(spec, np.zeros((spec.height, spec.width, N_CHANNELS)), frame_index)


@dataclass(frozen=True)
class FieldSequence:
    """Consecutive frames stored as one array [T, H, W, 4].

    Frame ``f`` describes time ``(start_index + f) * spec.frame_dt``.
    """

    spec: GridSpec
    data: np.ndarray
    start_index: int = 0

    def __post_init__(self):
        data = np.asarray(self.data, dtype=float)
        if data.ndim != 4 or data.shape[1:] != (self.spec.height, self.spec.width, N_CHANNELS):
            raise FieldError(f"sequence shape {data.shape} does not match grid {self.spec.shape}")
        _check_cell_values(data)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def frames(self) -> list[CrowdField]:
        return [CrowdField(self.spec, self.data[f], self.start_index + f) for f in range(len(self))]

    @property
    def end_index(self) -> int:
        """Index one past the last frame."""
        return self.start_index + len(self)

    def frame_time(self, f: int) -> float:
        return (self.start_index + f) * self.spec.frame_dt

    def slice(self, start: int, stop: int) -> "FieldSequence":
        """Frames with absolute indices in [start, stop)."""
        a, b = start - self.start_index, stop - self.start_index
        if a < 0 or b > len(self) or a >= b:
            raise FieldError(f"slice [{start}, {stop}) outside sequence [{self.start_index}, {self.end_index})")
        return FieldSequence(self.spec, self.data[a:b], start)

    def extend_hold_last(self, n_total: int) -> "FieldSequence":
        if n_total <= len(self):
            return self
        pad = np.repeat(self.data[-1:], n_total - len(self), axis=0)
        return FieldSequence(self.spec, np.concatenate([self.data, pad]), self.start_index)

    @classmethod
    def from_frames(cls, frames: Sequence[CrowdField]) -> "FieldSequence":
        if not frames:
            raise FieldError("cannot build a sequence from zero frames")
        spec = frames[0].spec
        for a, b in zip(frames, frames[1:]):
            if b.spec != spec:
                raise FieldError("frames use different grid specs")
            if b.frame_index != a.frame_index + 1:
                raise FieldError("frame indices are not consecutive")
        return cls(spec, np.stack([f.data for f in frames]), frames[0].frame_index)

    @classmethod
    def concat(cls, parts: Sequence["FieldSequence"]) -> "FieldSequence":
        for a, b in zip(parts, parts[1:]):
            if b.start_index != a.end_index or b.spec != a.spec:
                raise FieldError("sequences are not contiguous")
        return cls(parts[0].spec, np.concatenate([p.data for p in parts]), parts[0].start_index)


# --------------------------------------------------------------------------
# rasterization


def _splat(spec: GridSpec, pos: np.ndarray, vel: np.ndarray) -> np.ndarray:
    H, W = spec.shape
    out = np.zeros((H, W, N_CHANNELS))
    if len(pos) == 0:
        return out
    x0, y0 = spec.origin
    u = (pos[:, 0] - x0) / spec.cell_size - 0.5
    v = (pos[:, 1] - y0) / spec.cell_size - 0.5
    j0 = np.floor(u).astype(np.int64)
    i0 = np.floor(v).astype(np.int64)
    fu = u - j0
    fv = v - i0

    rows, cols, weights, owners = [], [], [], []
    for di, wi in ((0, 1.0 - fv), (1, fv)):
        for dj, wj in ((0, 1.0 - fu), (1, fu)):
            rows.append(i0 + di)
            cols.append(j0 + dj)
            weights.append(wi * wj)
            owners.append(np.arange(len(pos)))
    rows = np.concatenate(rows)
    cols = np.concatenate(cols)
    weights = np.concatenate(weights)
    owners = np.concatenate(owners)
    keep = (rows >= 0) & (rows < H) & (cols >= 0) & (cols < W) & (weights > 0)
    rows, cols, weights, owners = rows[keep], cols[keep], weights[keep], owners[keep]

    wsum = np.zeros((H, W))
    wvel = np.zeros((H, W, 2))
    np.add.at(wsum, (rows, cols), weights)
    np.add.at(wvel, (rows, cols), weights[:, None] * vel[owners])
    occupied = wsum > 0
    mu = np.zeros((H, W, 2))
    mu[occupied] = wvel[occupied] / wsum[occupied, None]

    dev = vel[owners] - mu[rows, cols]
    wdev = np.zeros((H, W))
    np.add.at(wdev, (rows, cols), weights * np.einsum("ij,ij->i", dev, dev))

    out[..., RHO] = wsum / spec.cell_area
    out[..., VX:VY + 1] = mu
    out[occupied, SIGMA2] = wdev[occupied] / wsum[occupied]
    return out


def _as_arrays(obs: Iterable[PedObservation]) -> tuple[np.ndarray, np.ndarray]:
    obs = list(obs)
    pos = np.array([o.pos for o in obs], dtype=float).reshape(-1, 2)
    vel = np.array([o.vel for o in obs], dtype=float).reshape(-1, 2)
    return pos, vel


def rasterize_points(pos: np.ndarray, vel: np.ndarray, spec: GridSpec, frame_index: int = 0) -> CrowdField:
    """Array form of :func:`rasterize_frame`."""
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    vel = np.asarray(vel, dtype=float).reshape(-1, 2)
    if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(vel))):
        raise FieldError("non-finite pedestrian position or velocity")
    inside = spec.contains(pos) if len(pos) else np.zeros(0, dtype=bool)
    return CrowdField(spec, _splat(spec, pos[inside], vel[inside]), frame_index)


def rasterize_frame(obs: Iterable[PedObservation], spec: GridSpec, frame_index: int = 0) -> CrowdField:
    """Bilinearly splat pedestrians onto the four nearest cell centers.

    Density is splatted mass per unit area; mean velocity and variance are
    the first and central second moments under the same splat weights.
    Pedestrians outside the grid rectangle are dropped.
    """
    pos, vel = _as_arrays(obs)
    return rasterize_points(pos, vel, spec, frame_index)


def rasterize_sequence(
    trajs: Sequence[Trajectory], spec: GridSpec, t0: float, n_frames: int, start_index: int = 0
) -> FieldSequence:
    """Rasterize frames ``[t0 + f*dt, t0 + (f+1)*dt)`` for ``f < n_frames``.

    A pedestrian with several samples inside one frame interval contributes
    only its last one.
    """
    if n_frames < 1:
        raise FieldError("n_frames must be at least 1")
    H, W = spec.shape
    data = np.zeros((n_frames, H, W, N_CHANNELS))
    if trajs:
        t = np.concatenate([tr.t for tr in trajs])
        pid = np.concatenate([np.full(len(tr), k) for k, tr in enumerate(trajs)])
        pos = np.concatenate([tr.pos for tr in trajs]).reshape(-1, 2)
        vel = np.concatenate([tr.vel for tr in trajs]).reshape(-1, 2)
        frame = np.floor((t - t0) / spec.frame_dt).astype(np.int64)
        ok = (frame >= 0) & (frame < n_frames)
        t, pid, pos, vel, frame = t[ok], pid[ok], pos[ok], vel[ok], frame[ok]
        order = np.lexsort((t, pid, frame))
        t, pid, pos, vel, frame = t[order], pid[order], pos[order], vel[order], frame[order]
        last = np.ones(len(t), dtype=bool)
        if len(t) > 1:
            last[:-1] = (frame[1:] != frame[:-1]) | (pid[1:] != pid[:-1])
        pos, vel, frame = pos[last], vel[last], frame[last]
        bounds = np.searchsorted(frame, np.arange(n_frames + 1))
        for f in range(n_frames):
            a, b = bounds[f], bounds[f + 1]
            if b > a:
                data[f] = rasterize_points(pos[a:b], vel[a:b], spec).data
    return FieldSequence(spec, data, start_index)


def total_mass(field: CrowdField) -> float:
    """Pedestrian count represented by a frame."""
    return float(np.sum(field.rho) * field.spec.cell_area)


# --------------------------------------------------------------------------
# continuous evaluation


def sample_points(seq: FieldSequence, pos, times, outside: str = "error") -> np.ndarray:
    """Interpolate the sequence at many (pos, time) pairs.

    Bilinear in space over the surrounding cell centers (edge cells are held
    within half a cell of the border), linear in time between bracketing
    frames, held constant before the first and after the last frame.

    Args:
        pos: [n, 2] positions in meters.
        times: [n] times in seconds.
        outside: ``"error"`` raises on positions outside the grid,
            ``"zero"`` returns an all-zero cell state for them.

    Returns:
        [n, 4] array of (rho, vx, vy, sigma2).
    """
    spec = seq.spec
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    times = np.broadcast_to(np.asarray(times, dtype=float), (len(pos),))
    inside = spec.contains(pos)
    if not np.all(inside) and outside == "error":
        bad = pos[~inside][0]
        raise OutOfDomainError(f"position ({bad[0]:.3f}, {bad[1]:.3f}) is outside the grid {spec.bounds}")

    H, W = spec.shape
    x0, y0 = spec.origin
    u = np.clip((pos[:, 0] - x0) / spec.cell_size - 0.5, 0.0, W - 1)
    v = np.clip((pos[:, 1] - y0) / spec.cell_size - 0.5, 0.0, H - 1)
    j0 = np.minimum(np.floor(u).astype(np.int64), max(W - 2, 0))
    i0 = np.minimum(np.floor(v).astype(np.int64), max(H - 2, 0))
    j1 = np.minimum(j0 + 1, W - 1)
    i1 = np.minimum(i0 + 1, H - 1)
    fu = (u - j0)[:, None]
    fv = (v - i0)[:, None]

    T = len(seq)
    s = np.clip(times / spec.frame_dt - seq.start_index, 0.0, T - 1)
    f0 = np.minimum(np.floor(s).astype(np.int64), max(T - 2, 0))
    f1 = np.minimum(f0 + 1, T - 1)
    ft = (s - f0)[:, None]

    d = seq.data

    def spatial(f):
        top = d[f, i0, j0] * (1 - fu) + d[f, i0, j1] * fu
        bottom = d[f, i1, j0] * (1 - fu) + d[f, i1, j1] * fu
        return top * (1 - fv) + bottom * fv

    out = spatial(f0) * (1 - ft) + spatial(f1) * ft
    out[:, RHO] = np.maximum(out[:, RHO], 0.0)
    out[:, SIGMA2] = np.maximum(out[:, SIGMA2], 0.0)
    if not np.all(inside):
        out[~inside] = 0.0
    return out


def sample_field(seq: FieldSequence, pos, time: float) -> CellState:
    """Crowd state at a continuous position and time."""
    return CellState.from_array(sample_points(seq, np.reshape(pos, (1, 2)), [time])[0])


# --------------------------------------------------------------------------
# CFLD binary format

_CFLD_HEADER = struct.Struct("<4sIIIII")


def write_cfld(target: str | Path | BinaryIO, seq: FieldSequence) -> None:
    T, H, W, d = seq.data.shape
    payload = _CFLD_HEADER.pack(CFLD_MAGIC, CFLD_VERSION, T, H, W, d) + seq.data.astype("<f4").tobytes()
    if isinstance(target, (str, Path)):
        Path(target).write_bytes(payload)
    else:
        target.write(payload)


def read_cfld(source: str | Path | BinaryIO | bytes, spec: GridSpec | None = None) -> FieldSequence:
    """Read a CFLD file.

    The format carries only array dimensions; geometry and frame spacing come
    from ``spec`` (unit cells at the origin and 1 s frames when omitted).
    """
    if isinstance(source, bytes):
        raw = source
    elif isinstance(source, (str, Path)):
        raw = Path(source).read_bytes()
    else:
        raw = source.read()
    if len(raw) < _CFLD_HEADER.size:
        raise FieldError("CFLD data too short for header")
    magic, version, T, H, W, d = _CFLD_HEADER.unpack_from(raw)
    if magic != CFLD_MAGIC:
        raise FieldError(f"bad CFLD magic {magic!r}")
    if version != CFLD_VERSION:
        raise FieldError(f"unsupported CFLD version {version}")
    if d != N_CHANNELS:
        raise FieldError(f"CFLD has {d} channels, expected {N_CHANNELS}")
    expected = T * H * W * d * 4
    body = raw[_CFLD_HEADER.size:]
    if len(body) != expected:
        raise FieldError(f"CFLD body has {len(body)} bytes, expected {expected}")
    data = np.frombuffer(body, dtype="<f4").reshape(T, H, W, d).astype(float)
    if spec is None:
        spec = GridSpec(height=H, width=W)
    elif spec.shape != (H, W):
        raise FieldError(f"CFLD grid {H}x{W} does not match expected {spec.height}x{spec.width}")
    return FieldSequence(spec, data)


def cfld_bytes(seq: FieldSequence) -> bytes:
    buf = io.BytesIO()
    write_cfld(buf, seq)
    return buf.getvalue()
