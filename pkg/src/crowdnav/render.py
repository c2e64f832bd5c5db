"""Debug rendering of crowd fields and plans to binary PPM images.

Density is drawn as blue cell shading, mean velocity as black segments from
cell centers and velocity spread as red circles of radius proportional to
sigma. Plans are overlaid as colored polylines.
"""

from __future__ import annotations

from pathlib import Path
from typing import Sequence

import numpy as np

from .fields import RHO, SIGMA2, VX, VY, FieldSequence

WHITE = np.array([255, 255, 255], dtype=np.uint8)
BLUE = np.array([0, 0, 255], dtype=np.uint8)
BLACK = (0, 0, 0)
RED = (220, 0, 0)
GREEN = (0, 170, 0)
PLAN_COLORS = (GREEN, BLACK, (200, 120, 0), (120, 0, 200))


def _draw_points(img: np.ndarray, xs: np.ndarray, ys: np.ndarray, color) -> None:
    h, w = img.shape[:2]
    xi = np.round(xs).astype(int)
    yi = np.round(ys).astype(int)
    ok = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
    img[yi[ok], xi[ok]] = color


def draw_line(img: np.ndarray, p0, p1, color) -> None:
    n = int(max(abs(p1[0] - p0[0]), abs(p1[1] - p0[1]))) + 2
    s = np.linspace(0.0, 1.0, n)
    _draw_points(img, p0[0] + s * (p1[0] - p0[0]), p0[1] + s * (p1[1] - p0[1]), color)


def draw_circle(img: np.ndarray, center, radius: float, color) -> None:
    n = max(8, int(2 * np.pi * radius) + 1)
    a = np.linspace(0.0, 2 * np.pi, n, endpoint=False)
    _draw_points(img, center[0] + radius * np.cos(a), center[1] + radius * np.sin(a), color)


def render_frame(
    frame: np.ndarray,
    rho_max: float,
    scale: int = 16,
    arrow_gain: float = 0.5,
    plans: Sequence[np.ndarray] = (),
    plan_pos: Sequence[np.ndarray | None] = (),
) -> np.ndarray:
    """RGB image [H*scale, W*scale, 3]; grid row 0 (lowest y) is the bottom of the image.

    ``plans`` are polylines in cell units (x = column, y = row);
    ``plan_pos`` optionally marks the robot on each plan.
    """
    h, w = frame.shape[:2]
    rho = frame[..., RHO]
    level = np.zeros_like(rho) if rho_max <= 0 else np.clip(rho / rho_max, 0.0, 1.0)
    cells = (WHITE[None, None] * (1 - level[..., None]) + BLUE[None, None] * level[..., None]).round().astype(np.uint8)
    img = np.repeat(np.repeat(cells[::-1], scale, axis=0), scale, axis=1)

    def px(x, y):
        return x * scale, (h - y) * scale - 1

    for r, c in zip(*np.nonzero(rho > 0)):
        cx, cy = px(c + 0.5, r + 0.5)
        vx, vy = frame[r, c, VX], frame[r, c, VY]
        draw_line(img, (cx, cy), (cx + vx * arrow_gain * scale, cy - vy * arrow_gain * scale), BLACK)
        sigma = float(np.sqrt(frame[r, c, SIGMA2]))
        if sigma > 0:
            draw_circle(img, (cx, cy), min(sigma * 0.5 * scale, 2 * scale), RED)
    for i, poly in enumerate(plans):
        color = PLAN_COLORS[i % len(PLAN_COLORS)]
        pts = [px(x, y) for x, y in poly]
        for a, b in zip(pts, pts[1:]):
            draw_line(img, a, b, color)
    for i, p in enumerate(plan_pos):
        if p is not None:
            cx, cy = px(*p)
            for rad in (1.0, 2.0, 3.0):
                draw_circle(img, (cx, cy), rad, PLAN_COLORS[i % len(PLAN_COLORS)])
    return img


def ppm_bytes(img: np.ndarray) -> bytes:
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes()


def read_ppm(data: bytes) -> np.ndarray:
    parts = data.split(b"\n", 3)
    if parts[0] != b"P6":
        raise ValueError("not a binary PPM")
    w, h = (int(v) for v in parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w, 3)


def _position_at(times: np.ndarray, pts: np.ndarray, t: float) -> np.ndarray | None:
    if len(times) == 0 or t < times[0]:
        return None
    return np.array([np.interp(t, times, pts[:, 0]), np.interp(t, times, pts[:, 1])])


def render_sequence(
    seq: FieldSequence,
    plans: Sequence[tuple[np.ndarray, np.ndarray]] = (),
    scale: int = 16,
) -> list[np.ndarray]:
    """One image per frame; ``plans`` are (times, positions in meters) pairs."""
    spec = seq.spec
    rho_max = float(seq.data[..., RHO].max()) if len(seq) else 0.0
    x0, y0 = spec.origin
    polys = [((pos - [x0, y0]) / spec.cell_size, times) for times, pos in plans]
    images = []
    for f in range(len(seq)):
        t = seq.frame_time(f)
        marks = [_position_at(times, poly, t) for poly, times in polys]
        images.append(render_frame(seq.data[f], rho_max, scale, plans=[p for p, _ in polys], plan_pos=marks))
    return images


def write_images(out_dir: str | Path, images: Sequence[np.ndarray], prefix: str = "frame") -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for i, img in enumerate(images):
        p = out / f"{prefix}_{i:04d}.ppm"
        tmp = p.with_suffix(".ppm.tmp")
        tmp.write_bytes(ppm_bytes(img))
        tmp.replace(p)
        paths.append(p)
    return paths
