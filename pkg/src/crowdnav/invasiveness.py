"""Social invasiveness of a robot moving through crowd fields.

The point cost is ``rho * (|mu_v - v_r|^2 + sigma2_v)``: zero in empty space,
``rho * sigma2_v`` when the robot matches the crowd's mean velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import RHO, SIGMA2, VX, VY, CellState, FieldSequence, sample_points

DEFAULT_BETA = 1e-4
INTEGRATION_DT = 0.1


@dataclass(frozen=True)
class RobotState:
    pos: tuple[float, float]
    vel: tuple[float, float] = (0.0, 0.0)
    time: float = 0.0


@dataclass(frozen=True)
class SegmentCost:
    invasive: float
    distance: float
    total: float

    def __add__(self, other: "SegmentCost") -> "SegmentCost":
        return SegmentCost(self.invasive + other.invasive, self.distance + other.distance, self.total + other.total)


ZERO_COST = SegmentCost(0.0, 0.0, 0.0)


def point_invasiveness(cell: CellState, v_r) -> float:
    dvx = cell.mu_v[0] - v_r[0]
    dvy = cell.mu_v[1] - v_r[1]
    return cell.rho * (dvx * dvx + dvy * dvy + cell.sigma2_v)


def invasiveness_array(states: np.ndarray, v_r: np.ndarray) -> np.ndarray:
    """Vectorized point cost for [n, 4] cell states and [n, 2] robot velocities."""
    dv = states[:, VX:VY + 1] - v_r
    return states[:, RHO] * (np.einsum("ij,ij->i", dv, dv) + states[:, SIGMA2])


def _n_steps(duration: np.ndarray, dt_int: float) -> np.ndarray:
    return np.maximum(2, np.ceil(duration / dt_int - 1e-9).astype(np.int64))


def segment_costs(
    seq: FieldSequence,
    a_pos: np.ndarray,
    a_time: np.ndarray,
    b_pos: np.ndarray,
    b_time: np.ndarray,
    beta: float = DEFAULT_BETA,
    dt_int: float = INTEGRATION_DT,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Costs of many straight constant-speed segments at once.

    The time integral of the point cost uses the midpoint rule with
    ``ceil(duration / dt_int)`` (at least 2) equal sub-intervals. Samples
    outside the grid count as crowd-free.

    Returns:
        (invasive, distance, total) arrays of length n.
    """
    a_pos = np.asarray(a_pos, dtype=float).reshape(-1, 2)
    b_pos = np.asarray(b_pos, dtype=float).reshape(-1, 2)
    a_time = np.asarray(a_time, dtype=float).reshape(-1)
    b_time = np.asarray(b_time, dtype=float).reshape(-1)
    duration = b_time - a_time
    if np.any(duration <= 0):
        raise ValueError("segment duration must be positive")
    delta = b_pos - a_pos
    distance = np.hypot(delta[:, 0], delta[:, 1])
    vel = delta / duration[:, None]

    steps = _n_steps(duration, dt_int)
    owner = np.repeat(np.arange(len(steps)), steps)
    offsets = np.arange(len(owner)) - np.repeat(np.cumsum(steps) - steps, steps)
    frac = (offsets + 0.5) / steps[owner]
    pts = a_pos[owner] + frac[:, None] * delta[owner]
    ts = a_time[owner] + frac * duration[owner]
    states = sample_points(seq, pts, ts, outside="zero")
    point = invasiveness_array(states, vel[owner])
    h = duration / steps
    invasive = np.bincount(owner, weights=point * h[owner], minlength=len(steps))
    return invasive, distance, invasive + beta * distance


def segment_cost(
    seq: FieldSequence,
    a: RobotState,
    b_pos,
    b_time: float,
    beta: float = DEFAULT_BETA,
    dt_int: float = INTEGRATION_DT,
) -> SegmentCost:
    """Cost of moving from ``a`` to ``b_pos`` in a straight line, arriving at ``b_time``."""
    if not b_time > a.time:
        raise ValueError(f"zero or negative duration segment ({a.time} -> {b_time})")
    inv, dist, total = segment_costs(seq, [a.pos], [a.time], [b_pos], [b_time], beta, dt_int)
    return SegmentCost(float(inv[0]), float(dist[0]), float(total[0]))


def trajectory_cost(
    seq: FieldSequence,
    waypoints: Sequence[RobotState],
    beta: float = DEFAULT_BETA,
    dt_int: float = INTEGRATION_DT,
) -> SegmentCost:
    """Sum of segment costs between consecutive waypoints."""
    if len(waypoints) < 2:
        raise ValueError("a trajectory needs at least two waypoints")
    cost = ZERO_COST
    for a, b in zip(waypoints, waypoints[1:]):
        cost = cost + segment_cost(seq, a, b.pos, b.time, beta, dt_int)
    return cost


def path_cost(
    seq: FieldSequence, pos: np.ndarray, times: np.ndarray, beta: float = DEFAULT_BETA, dt_int: float = INTEGRATION_DT
) -> float:
    """Total cost of a waypoint path given as arrays; same sum as :func:`trajectory_cost`."""
    pos = np.asarray(pos, dtype=float).reshape(-1, 2)
    times = np.asarray(times, dtype=float).reshape(-1)
    if len(pos) < 2:
        return 0.0
    _, _, total = segment_costs(seq, pos[:-1], times[:-1], pos[1:], times[1:], beta, dt_int)
    out = 0.0
    for t in total:
        out += float(t)
    return out


def speed_ok(a_pos, a_time: float, b_pos, b_time: float, v_max: float) -> bool:
    d = math.dist(a_pos, b_pos)
    return d <= v_max * (b_time - a_time) + 1e-9
