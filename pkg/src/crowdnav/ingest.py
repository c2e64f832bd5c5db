"""Trajectory file parsing and supervised windowing."""

from __future__ import annotations

import csv
import io
import math
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .fields import FieldSequence, GridSpec, Trajectory, rasterize_sequence

CANONICAL_HEADER = ["time", "pid", "x", "y", "vx", "vy"]


class ParseError(ValueError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class IngestConfig:
    spec: GridSpec
    k: int = 10
    tau: int = 10
    stride: int = 1
    max_speed: float = 5.0

    def __post_init__(self):
        if self.k < 1 or self.tau < 1 or self.stride < 1:
            raise ValueError(f"k, tau and stride must be >= 1 (got {self.k}, {self.tau}, {self.stride})")


@dataclass(frozen=True)
class DatasetWindow:
    input: FieldSequence
    target: FieldSequence

    def __post_init__(self):
        if self.input.spec != self.target.spec:
            raise ValueError("input and target use different grids")
        if self.target.start_index != self.input.end_index:
            raise ValueError("input and target are not contiguous")


def _text(data: bytes | str) -> str:
    if isinstance(data, (bytes, bytearray)):
        try:
            return data.decode("utf-8")
        except UnicodeDecodeError as exc:
            line = data[: exc.start].count(b"\n") + 1
            raise ParseError(f"invalid UTF-8 at byte {exc.start}", line) from None
    return data


def _rows(data: bytes | str) -> Iterator[tuple[int, list[str]]]:
    """CSV rows with their 1-based line numbers; malformed CSV becomes a ParseError."""
    reader = csv.reader(io.StringIO(_text(data)))
    while True:
        try:
            fields = next(reader)
        except StopIteration:
            return
        except csv.Error as exc:
            raise ParseError(f"malformed CSV ({exc})", reader.line_num or 1) from None
        yield reader.line_num, fields


def _group(rows: list[tuple[float, int, float, float, float, float]]) -> list[Trajectory]:
    by_pid: dict[int, list] = defaultdict(list)
    for row in rows:
        by_pid[row[1]].append(row)
    out = []
    for pid in sorted(by_pid):
        arr = np.array([(t, x, y, vx, vy) for t, _, x, y, vx, vy in by_pid[pid]], dtype=float)
        order = np.argsort(arr[:, 0], kind="stable")
        arr = arr[order]
        out.append(Trajectory(pid, arr[:, 0], arr[:, 1:3], arr[:, 3:5]))
    return out


def parse_atc_csv(
    data: bytes | str,
    max_speed: float = 5.0,
    crop: tuple[float, float, float, float] | None = None,
    time_range: tuple[float, float] | None = None,
) -> list[Trajectory]:
    """Parse ATC tracker rows into SI trajectories.

    Columns: time (ms), person id, x, y, z (mm), speed (mm/s), motion angle
    (rad), facing angle (rad). Velocity is rebuilt from speed and motion angle.
    Rows faster than ``max_speed`` are dropped; ``crop`` (xmin, ymin, xmax,
    ymax in m) and ``time_range`` (s) restrict the kept rows.
    """
    rows = []
    for lineno, fields in _rows(data):
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != 8:
            raise ParseError(f"expected 8 fields, found {len(fields)}", lineno)
        try:
            t_ms, pid, x, y, _z, speed, motion, _facing = (float(f) for f in fields)
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", lineno) from None
        if not all(math.isfinite(v) for v in (t_ms, pid, x, y, speed, motion)):
            raise ParseError("non-finite value", lineno)
        if speed > max_speed * 1000.0:
            continue
        t, px, py = t_ms / 1000.0, x / 1000.0, y / 1000.0
        if crop is not None and not (crop[0] <= px <= crop[2] and crop[1] <= py <= crop[3]):
            continue
        if time_range is not None and not (time_range[0] <= t < time_range[1]):
            continue
        v = speed / 1000.0
        rows.append((t, int(pid), px, py, v * math.cos(motion), v * math.sin(motion)))
    return _group(rows)


def parse_canonical_csv(data: bytes | str, max_speed: float | None = None) -> list[Trajectory]:
    """Parse ``time,pid,x,y,vx,vy`` rows (SI units); rows are re-sorted by time per pid."""
    rows_in = _rows(data)
    _, header = next(rows_in, (1, None))
    if header is None or [h.strip() for h in header] != CANONICAL_HEADER:
        raise ParseError(f"missing or wrong header, expected {','.join(CANONICAL_HEADER)}", 1)
    rows = []
    for lineno, fields in rows_in:
        if not fields or all(not f.strip() for f in fields):
            continue
        if len(fields) != 6:
            raise ParseError(f"expected 6 fields, found {len(fields)}", lineno)
        try:
            t, pid, x, y, vx, vy = (float(f) for f in fields)
        except ValueError as exc:
            raise ParseError(f"non-numeric field ({exc})", lineno) from None
        if not all(math.isfinite(v) for v in (t, pid, x, y, vx, vy)):
            raise ParseError("non-finite value", lineno)
        if max_speed is not None and math.hypot(vx, vy) > max_speed:
            continue
        rows.append((t, int(pid), x, y, vx, vy))
    return _group(rows)


def format_canonical_csv(trajs: Sequence[Trajectory]) -> str:
    lines = [",".join(CANONICAL_HEADER)]
    for tr in trajs:
        for t, p, v in zip(tr.t, tr.pos, tr.vel):
            lines.append(f"{t:.9g},{tr.pid},{p[0]:.9g},{p[1]:.9g},{v[0]:.9g},{v[1]:.9g}")
    return "\n".join(lines) + "\n"


def write_canonical_csv(path: str | Path, trajs: Sequence[Trajectory]) -> None:
    Path(path).write_text(format_canonical_csv(trajs))


def time_extent(trajs: Sequence[Trajectory]) -> tuple[float, float] | None:
    ts = [tr.t for tr in trajs if len(tr)]
    if not ts:
        return None
    return float(min(t.min() for t in ts)), float(max(t.max() for t in ts))


def window_sequence(seq: FieldSequence, k: int, tau: int, stride: int = 1) -> list[DatasetWindow]:
    """Slice (k input, tau target) windows every ``stride`` frames.

    Windows whose target frames hold no pedestrians are skipped, since the
    training loss is undefined without non-empty target cells.
    """
    windows = []
    n = len(seq)
    for s in range(0, n - (k + tau) + 1, stride):
        a = seq.start_index + s
        target = seq.slice(a + k, a + k + tau)
        if not np.any(target.data[..., 0] > 0):
            continue
        windows.append(DatasetWindow(seq.slice(a, a + k), target))
    return windows


def window_dataset(trajs: Sequence[Trajectory], cfg: IngestConfig, t0: float | None = None) -> list[DatasetWindow]:
    """Rasterize the whole time range of ``trajs`` once, then window it."""
    extent = time_extent(trajs)
    if extent is None:
        return []
    start = extent[0] if t0 is None else t0
    n_frames = int(math.floor((extent[1] - start) / cfg.spec.frame_dt)) + 1
    if n_frames < cfg.k + cfg.tau:
        return []
    kept = []
    for tr in trajs:
        ok = np.linalg.norm(tr.vel, axis=1) <= cfg.max_speed
        kept.append(Trajectory(tr.pid, tr.t[ok], tr.pos[ok], tr.vel[ok]))
    seq = rasterize_sequence(kept, cfg.spec, start, n_frames)
    return window_sequence(seq, cfg.k, cfg.tau, cfg.stride)
