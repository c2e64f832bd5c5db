"""Synthetic pedestrian flows.

Agents walk straight toward their goals at a preferred speed and push each
other apart with a linear-falloff repulsion that also nudges them to their
right, so opposing walkers pass each other. The model is intentionally small:
it only has to produce flows with enough structure to learn from.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .fields import Trajectory

DOMAIN = (0.0, 0.0, 36.0, 12.0)
GOAL_RADIUS = 0.3
SCENARIO_KINDS = ("corridor_bidirectional", "crossing", "blob")

Segment = tuple[tuple[float, float], tuple[float, float]]


@dataclass(frozen=True)
class AgentSpec:
    start: tuple[float, float]
    goal: tuple[float, float]
    preferred_speed: float = 1.3
    spawn_time: float = 0.0

    def __post_init__(self):
        if not 0 < self.preferred_speed <= 2.5:
            raise ValueError(f"preferred_speed must be in (0, 2.5], got {self.preferred_speed}")


@dataclass(frozen=True)
class FlowSpec:
    """Poisson stream of agents from a random point on ``entrance`` to a random point on ``exit``."""

    entrance: Segment
    exit: Segment
    rate: float
    speed_mean: float = 1.3
    speed_std: float = 0.15

    def __post_init__(self):
        if self.rate < 0:
            raise ValueError(f"spawn rate must be non-negative, got {self.rate}")


@dataclass(frozen=True)
class ScenarioSpec:
    bounds: tuple[float, float, float, float] = DOMAIN
    agents: tuple[AgentSpec, ...] = ()
    flows: tuple[FlowSpec, ...] = ()
    duration: float = 60.0
    seed: int = 0
    repulsion_gain: float = 1.0
    repulsion_radius: float = 1.0
    sidestep: float = 0.5
    dt_sim: float = 0.1
    record_every: int = 1
    kind: str = "custom"

    def __post_init__(self):
        if self.duration < 0:
            raise ValueError("duration must be non-negative")
        if not self.dt_sim > 0:
            raise ValueError("dt_sim must be positive")
        if self.record_every < 1:
            raise ValueError("record_every must be >= 1")


def _lerp(seg: Segment, u: float) -> tuple[float, float]:
    (ax, ay), (bx, by) = seg
    return ax + u * (bx - ax), ay + u * (by - ay)


def spawn_agents(spec: ScenarioSpec) -> list[AgentSpec]:
    """Explicit agents plus flow arrivals, ordered by spawn time."""
    rng = np.random.default_rng(spec.seed)
    agents = list(spec.agents)
    for flow in spec.flows:
        if flow.rate <= 0:
            continue
        t = rng.exponential(1.0 / flow.rate)
        while t < spec.duration:
            u_in, u_out = rng.random(2)
            speed = float(np.clip(rng.normal(flow.speed_mean, flow.speed_std), 0.3, 2.5))
            agents.append(AgentSpec(_lerp(flow.entrance, u_in), _lerp(flow.exit, u_out), speed, float(t)))
            t += rng.exponential(1.0 / flow.rate)
    agents.sort(key=lambda a: a.spawn_time)
    return agents


def simulate(spec: ScenarioSpec) -> list[Trajectory]:
    """Integrate all agents with explicit Euler steps of ``spec.dt_sim``.

    Each step records (t, pos, vel) for every active agent, where ``vel`` is
    the velocity applied over the following step. Agents are removed once
    within 0.3 m of their goal. Speeds are capped at 1.5x preferred speed.
    """
    agents = spawn_agents(spec)
    n_steps = int(round(spec.duration / spec.dt_sim))
    if not agents or n_steps == 0:
        return []
    xmin, ymin, xmax, ymax = spec.bounds
    lo = np.array([xmin, ymin])
    hi = np.array([xmax, ymax])

    n = len(agents)
    start = np.array([a.start for a in agents], dtype=float)
    goal = np.array([a.goal for a in agents], dtype=float)
    speed = np.array([a.preferred_speed for a in agents], dtype=float)
    spawn_step = np.array([math.ceil(a.spawn_time / spec.dt_sim - 1e-9) for a in agents])

    pos = np.clip(start, lo, hi)
    alive = np.zeros(n, dtype=bool)
    done = np.zeros(n, dtype=bool)
    log_t: list[list[float]] = [[] for _ in range(n)]
    log_p: list[list[np.ndarray]] = [[] for _ in range(n)]
    log_v: list[list[np.ndarray]] = [[] for _ in range(n)]

    for step in range(n_steps):
        t = step * spec.dt_sim
        alive |= (spawn_step <= step) & ~done
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            continue
        p = pos[idx]
        to_goal = goal[idx] - p
        dist = np.linalg.norm(to_goal, axis=1)
        heading = np.zeros_like(to_goal)
        moving = dist > 0
        heading[moving] = to_goal[moving] / dist[moving, None]
        vel = speed[idx, None] * heading

        if spec.repulsion_gain != 0 and len(idx) > 1:
            diff = p[:, None, :] - p[None, :, :]
            d = np.linalg.norm(diff, axis=2)
            near = (d > 0) & (d < spec.repulsion_radius)
            mag = np.where(near, spec.repulsion_gain * (1.0 - d / spec.repulsion_radius), 0.0)
            safe = np.where(near, d, 1.0)
            away = diff / safe[:, :, None]
            # rotate part of the push to the agent's right so head-on pairs pass instead of stalling
            right = np.stack([-away[..., 1], away[..., 0]], axis=-1)
            vel = vel + np.sum(mag[:, :, None] * (away + spec.sidestep * right), axis=1)

        cap = 1.5 * speed[idx]
        norm = np.linalg.norm(vel, axis=1)
        over = norm > cap
        vel[over] *= (cap[over] / norm[over])[:, None]

        if step % spec.record_every == 0:
            for k, a in enumerate(idx):
                log_t[a].append(t)
                log_p[a].append(p[k].copy())
                log_v[a].append(vel[k].copy())

        pos[idx] = np.clip(p + vel * spec.dt_sim, lo, hi)
        arrived = np.linalg.norm(goal[idx] - pos[idx], axis=1) < GOAL_RADIUS
        done[idx[arrived]] = True
        alive[idx[arrived]] = False

    return [
        Trajectory(pid, np.array(log_t[pid]), np.array(log_p[pid]).reshape(-1, 2), np.array(log_v[pid]).reshape(-1, 2))
        for pid in range(n)
        if log_t[pid]
    ]


def _corridor(rng: np.random.Generator, rate: float | None) -> dict:
    r = rate if rate is not None else 0.35 * rng.uniform(0.8, 1.2)
    east = FlowSpec(((0.2, 1.0), (0.2, 7.0)), ((35.8, 1.0), (35.8, 7.0)), r)
    west = FlowSpec(((35.8, 5.0), (35.8, 11.0)), ((0.2, 5.0), (0.2, 11.0)), r)
    return {"flows": (east, west)}


def _crossing(rng: np.random.Generator, rate: float | None) -> dict:
    r = rate if rate is not None else 0.3 * rng.uniform(0.8, 1.2)
    along = FlowSpec(((0.2, 3.0), (0.2, 9.0)), ((35.8, 3.0), (35.8, 9.0)), r)
    across = FlowSpec(((14.0, 0.2), (22.0, 0.2)), ((14.0, 11.8), (22.0, 11.8)), r)
    return {"flows": (along, across)}


def _blob(rng: np.random.Generator, rate: float | None) -> dict:
    n_agents = int(rng.integers(12, 21)) if rate is None else int(round(rate))
    center = np.array([rng.uniform(28.0, 31.0), rng.uniform(4.5, 7.5)])
    speed = float(rng.uniform(0.9, 1.3))
    angle = math.pi + rng.uniform(-0.1, 0.1)
    direction = np.array([math.cos(angle), math.sin(angle)])
    travel = 24.0
    agents = []
    for _ in range(n_agents):
        r = 1.6 * math.sqrt(rng.random())
        phi = rng.uniform(0, 2 * math.pi)
        start = center + r * np.array([math.cos(phi), math.sin(phi)])
        goal = start + travel * direction
        agents.append(AgentSpec(tuple(start), tuple(goal), speed, 0.0))
    return {"agents": tuple(agents), "repulsion_gain": 0.0}


_BUILDERS = {"corridor_bidirectional": _corridor, "crossing": _crossing, "blob": _blob}


def make_corpus(
    kind: str, seed: int, n_runs: int = 1, duration: float = 120.0, rate: float | None = None
) -> list[ScenarioSpec]:
    """Scenario family on the 36 m x 12 m domain.

    ``corridor_bidirectional``: opposing flows along x in overlapping lanes.
    ``crossing``: an x flow crossed by a y flow. ``blob``: one cluster moving
    at a common constant velocity (``rate`` overrides the agent count).
    """
    if kind not in _BUILDERS:
        raise ValueError(f"unknown scenario kind {kind!r}; valid kinds: {', '.join(SCENARIO_KINDS)}")
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    specs = []
    for run in range(n_runs):
        rng = np.random.default_rng([seed, run])
        params = _BUILDERS[kind](rng, rate)
        run_seed = int(rng.integers(0, 2**63 - 1))
        specs.append(ScenarioSpec(duration=duration, seed=run_seed, kind=kind, **params))
    return specs


def simulate_many(specs: Sequence[ScenarioSpec]) -> list[list[Trajectory]]:
    return [simulate(s) for s in specs]
