"""Spatiotemporal roadmap planning through predicted crowd fields.

Nodes are (position, time) samples; directed edges go forward in time and
respect the robot speed limit. Dijkstra searches the roadmap and evaluates
edge costs only when an edge's tail node is first expanded.
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .fields import FieldSequence
from .forecaster import Predictor
from .invasiveness import DEFAULT_BETA, INTEGRATION_DT, RobotState, path_cost, segment_costs, speed_ok

EdgeCostFn = Callable[[np.ndarray], np.ndarray]


class PlanningInfeasible(RuntimeError):
    pass


class PlanningTimeout(RuntimeError):
    def __init__(self, message: str, partial: "ExecutedRun"):
        super().__init__(message)
        self.partial = partial


@dataclass(frozen=True)
class PlanConfig:
    n_samples: int = 2000
    v_max: float = 1.5
    goal_radius: float = 0.5
    beta: float = DEFAULT_BETA
    T_max: float = 60.0
    replan_interval: float = 1.0
    seed: int = 0
    max_out_degree: int = 16
    # Weight of time against space in the nearest-successor metric (m/s).
    time_scale: float | None = None
    tau: int = 10
    max_cycles: int = 200
    dt_int: float = INTEGRATION_DT

    def __post_init__(self):
        if self.n_samples < 10:
            raise ValueError("n_samples must be >= 10")
        if self.v_max < 0:
            raise ValueError("v_max must be non-negative")
        if not self.T_max > 0:
            raise ValueError("T_max must be positive")
        if not self.replan_interval > 0:
            raise ValueError("replan_interval must be positive")

    @property
    def metric_scale(self) -> float:
        return self.v_max if self.time_scale is None else self.time_scale


@dataclass(frozen=True)
class RoadmapNode:
    id: int
    pos: tuple[float, float]
    time: float


@dataclass
class Roadmap:
    """Nodes as arrays plus CSR out-edges with a lazily filled cost cache (NaN = unset)."""

    pos: np.ndarray
    time: np.ndarray
    start: int
    is_goal: np.ndarray
    out_ptr: np.ndarray
    out_idx: np.ndarray
    edge_cost: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.edge_cost is None:
            self.edge_cost = np.full(len(self.out_idx), np.nan)

    @property
    def n_nodes(self) -> int:
        return len(self.time)

    @property
    def n_edges(self) -> int:
        return len(self.out_idx)

    def node(self, i: int) -> RoadmapNode:
        return RoadmapNode(i, (float(self.pos[i, 0]), float(self.pos[i, 1])), float(self.time[i]))

    def edges_from(self, i: int) -> range:
        return range(self.out_ptr[i], self.out_ptr[i + 1])

    def edge_tails(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_nodes), np.diff(self.out_ptr))

    def goal_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.is_goal)

    @classmethod
    def from_edges(
        cls, pos, time, start: int, is_goal, edges: Sequence[tuple[int, int]], costs: Sequence[float] | None = None
    ) -> "Roadmap":
        """Roadmap with an explicit edge list (costs optional, preset costs are never recomputed)."""
        pos = np.asarray(pos, dtype=float).reshape(-1, 2)
        n = len(pos)
        order = sorted(range(len(edges)), key=lambda e: edges[e])
        tails = np.array([edges[e][0] for e in order], dtype=np.int64)
        heads = np.array([edges[e][1] for e in order], dtype=np.int64)
        ptr = np.searchsorted(tails, np.arange(n + 1)) if len(tails) else np.zeros(n + 1, dtype=np.int64)
        cost = None if costs is None else np.array([costs[e] for e in order], dtype=float)
        return cls(pos, np.asarray(time, dtype=float), start, np.asarray(is_goal, dtype=bool), ptr, heads, cost)


def connect_nodes(pos: np.ndarray, time: np.ndarray, is_goal: np.ndarray, cfg: PlanConfig) -> tuple[np.ndarray, np.ndarray]:
    """Forward-time, speed-admissible edges to each node's nearest successors.

    Distance is ``sqrt(|dp|^2 + (s * dt)^2)`` with ``s = cfg.metric_scale``;
    each non-goal node keeps at most ``cfg.max_out_degree`` successors.
    """
    n = len(time)
    s2 = cfg.metric_scale ** 2
    k = cfg.max_out_degree
    heads: list[np.ndarray] = []
    counts = np.zeros(n, dtype=np.int64)
    chunk = 256
    for a in range(0, n, chunk):
        rows = np.arange(a, min(n, a + chunk))
        dt = time[None, :] - time[rows, None]
        dp = pos[None, :, :] - pos[rows, None, :]
        d2 = dp[..., 0] ** 2 + dp[..., 1] ** 2
        ok = (dt > 0) & (d2 <= (cfg.v_max * dt) ** 2 + 1e-12)
        ok[is_goal[rows]] = False
        metric = np.where(ok, d2 + s2 * dt * dt, np.inf)
        for r, i in enumerate(rows):
            m = int(ok[r].sum())
            if m == 0:
                heads.append(np.zeros(0, dtype=np.int64))
                continue
            if m > k:
                cand = np.argpartition(metric[r], k - 1)[:k]
            else:
                cand = np.flatnonzero(ok[r])
            cand = cand[np.lexsort((cand, metric[r, cand]))]
            heads.append(cand.astype(np.int64))
            counts[i] = len(cand)
    ptr = np.concatenate([[0], np.cumsum(counts)])
    idx = np.concatenate(heads) if heads else np.zeros(0, dtype=np.int64)
    return ptr, idx


def _with_edges(ptr: np.ndarray, idx: np.ndarray, extra: Sequence[tuple[int, int]]) -> tuple[np.ndarray, np.ndarray]:
    """CSR adjacency with ``extra`` edges appended after each tail's own heads."""
    heads = [list(idx[ptr[i]:ptr[i + 1]]) for i in range(len(ptr) - 1)]
    for a, b in extra:
        if b not in heads[a]:
            heads[a].append(b)
    counts = np.array([len(h) for h in heads], dtype=np.int64)
    flat = np.array([v for h in heads for v in h], dtype=np.int64)
    return np.concatenate([[0], np.cumsum(counts)]), flat


def build_roadmap(
    cfg: PlanConfig,
    x_curr,
    x_goal,
    bounds: tuple[float, float, float, float],
    t_start: float = 0.0,
    seed=None,
    via: Sequence[RobotState] = (),
) -> Roadmap:
    """Sample ``cfg.n_samples`` space-time nodes and connect them.

    Node 0 is the start ``(x_curr, t_start)``; goal nodes sit at ``x_goal``
    at ``ceil(T_max / replan_interval)`` evenly spaced times up to
    ``t_start + T_max``. ``via`` is a path continuing from the start (its
    last state at the goal); it is added as a chain of nodes with explicit
    edges, so the roadmap always contains it.
    """
    xmin, ymin, xmax, ymax = bounds
    for name, p in (("start", x_curr), ("goal", x_goal)):
        if not (xmin <= p[0] <= xmax and ymin <= p[1] <= ymax):
            raise PlanningInfeasible(f"{name} {tuple(p)} is outside bounds {bounds}")
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    samples = np.column_stack(
        [
            rng.uniform(xmin, xmax, cfg.n_samples),
            rng.uniform(ymin, ymax, cfg.n_samples),
        ]
    )
    sample_t = t_start + rng.uniform(0.0, cfg.T_max, cfg.n_samples)
    n_goal = max(1, math.ceil(cfg.T_max / cfg.replan_interval - 1e-9))
    goal_t = t_start + cfg.T_max * np.arange(1, n_goal + 1) / n_goal

    inner = list(via[:-1])
    via_pos = np.array([w.pos for w in inner], dtype=float).reshape(-1, 2)
    via_t = np.array([w.time for w in inner], dtype=float)
    pos = np.vstack(
        [np.asarray(x_curr, dtype=float)[None], samples, via_pos, np.tile(np.asarray(x_goal, dtype=float), (n_goal, 1))]
    )
    time = np.concatenate([[t_start], sample_t, via_t, goal_t])
    is_goal = np.zeros(len(time), dtype=bool)
    is_goal[-n_goal:] = True
    ptr, idx = connect_nodes(pos, time, is_goal, cfg)
    if via:
        first = 1 + cfg.n_samples
        chain = [0] + list(range(first, first + len(inner)))
        match = np.flatnonzero(np.abs(goal_t - via[-1].time) < 1e-6)
        if len(match):
            chain.append(len(time) - n_goal + int(match[0]))
        extra = [
            (a, b)
            for a, b in zip(chain, chain[1:])
            if time[b] > time[a] and speed_ok(pos[a], time[a], pos[b], time[b], cfg.v_max)
        ]
        ptr, idx = _with_edges(ptr, idx, extra)
    if ptr[1] == ptr[0]:
        raise PlanningInfeasible("no admissible edge leaves the start node")
    return Roadmap(pos, time, 0, is_goal, ptr, idx)


@dataclass
class Plan:
    waypoints: list[RobotState]
    expected_cost: float
    arrival_time: float
    nodes: list[int] = field(default_factory=list)

    @property
    def positions(self) -> np.ndarray:
        return np.array([w.pos for w in self.waypoints], dtype=float).reshape(-1, 2)

    @property
    def times(self) -> np.ndarray:
        return np.array([w.time for w in self.waypoints], dtype=float)


def field_cost_fn(roadmap: Roadmap, seq: FieldSequence, cfg: PlanConfig) -> EdgeCostFn:
    tails = roadmap.edge_tails()

    def cost(edges: np.ndarray) -> np.ndarray:
        t, h = tails[edges], roadmap.out_idx[edges]
        _, _, total = segment_costs(
            seq, roadmap.pos[t], roadmap.time[t], roadmap.pos[h], roadmap.time[h], cfg.beta, cfg.dt_int
        )
        return total

    return cost


def _waypoints(roadmap: Roadmap, nodes: list[int]) -> list[RobotState]:
    out = []
    for a, b in zip(nodes, nodes[1:] + [None]):
        if b is None:
            vel = (0.0, 0.0)
        else:
            dt = roadmap.time[b] - roadmap.time[a]
            d = (roadmap.pos[b] - roadmap.pos[a]) / dt
            vel = (float(d[0]), float(d[1]))
        out.append(RobotState((float(roadmap.pos[a, 0]), float(roadmap.pos[a, 1])), vel, float(roadmap.time[a])))
    return out


def search(
    roadmap: Roadmap,
    seq: FieldSequence | None,
    cfg: PlanConfig,
    lazy: bool = True,
    cost_fn: EdgeCostFn | None = None,
) -> Plan:
    """Dijkstra to the cheapest goal node.

    Edge costs missing from the roadmap cache are computed in one batch when
    their tail node is settled (or all up front with ``lazy=False``) and
    stored back in the cache.
    """
    if not roadmap.is_goal.any():
        raise PlanningInfeasible("roadmap has no goal node")
    if cost_fn is None:
        if seq is None:
            raise ValueError("either a field sequence or a cost function is required")
        cost_fn = field_cost_fn(roadmap, seq, cfg)
    cache = roadmap.edge_cost
    if not lazy:
        unset = np.flatnonzero(np.isnan(cache))
        if len(unset):
            cache[unset] = cost_fn(unset)

    n = roadmap.n_nodes
    dist = np.full(n, np.inf)
    parent = np.full(n, -1, dtype=np.int64)
    settled = np.zeros(n, dtype=bool)
    dist[roadmap.start] = 0.0
    heap = [(0.0, roadmap.start)]
    goal = -1
    while heap:
        d, u = heapq.heappop(heap)
        if settled[u]:
            continue
        settled[u] = True
        if roadmap.is_goal[u]:
            goal = u
            break
        lo, hi = roadmap.out_ptr[u], roadmap.out_ptr[u + 1]
        if hi == lo:
            continue
        edges = np.arange(lo, hi)
        unset = edges[np.isnan(cache[edges])]
        if len(unset):
            cache[unset] = cost_fn(unset)
        for e in range(lo, hi):
            v = roadmap.out_idx[e]
            if settled[v]:
                continue
            nd = d + cache[e]
            if nd < dist[v]:
                dist[v] = nd
                parent[v] = u
                heapq.heappush(heap, (nd, int(v)))
    if goal < 0:
        raise PlanningInfeasible("goal is unreachable on the roadmap")
    nodes = [goal]
    while nodes[-1] != roadmap.start:
        nodes.append(int(parent[nodes[-1]]))
    nodes.reverse()
    return Plan(_waypoints(roadmap, nodes), float(dist[goal]), float(roadmap.time[goal]), nodes)


# --------------------------------------------------------------------------
# protocols


def planning_sequence(observed: FieldSequence, prediction: FieldSequence, horizon: float) -> FieldSequence:
    """Last observed frame followed by the prediction, held to cover ``horizon`` seconds."""
    now = observed.slice(observed.end_index - 1, observed.end_index)
    if prediction.start_index != observed.end_index:
        raise ValueError("prediction does not start right after the observation")
    seq = FieldSequence.concat([now, prediction])
    return seq.extend_hold_last(int(math.ceil(horizon / seq.spec.frame_dt)) + 2)


def _trivial_plan(pos, t: float) -> Plan:
    return Plan([RobotState((float(pos[0]), float(pos[1])), (0.0, 0.0), t)], 0.0, t, [0])


def plan_once(
    cfg: PlanConfig,
    predictor: Predictor,
    observed: FieldSequence,
    x_curr,
    x_goal,
    seed=None,
    lazy: bool = True,
    via: Sequence[RobotState] = (),
) -> tuple[Plan, FieldSequence]:
    """Single forecast, single roadmap, single search.

    Returns the plan and the (hold-last extended) field it was planned on.
    ``via`` is passed to :func:`build_roadmap`.
    """
    t_now = (observed.end_index - 1) * observed.spec.frame_dt
    prediction = predictor.predict(observed, cfg.tau)
    seq = planning_sequence(observed, prediction, cfg.T_max)
    if math.dist(x_curr, x_goal) <= cfg.goal_radius:
        return _trivial_plan(x_curr, t_now), seq
    roadmap = build_roadmap(cfg, x_curr, x_goal, observed.spec.bounds, t_now, seed, via)
    return search(roadmap, seq, cfg, lazy), seq


def truncate(waypoints: Sequence[RobotState], t_stop: float) -> list[RobotState]:
    """Prefix of a piecewise-linear trajectory up to ``t_stop`` (inclusive)."""
    out = [waypoints[0]]
    for a, b in zip(waypoints, waypoints[1:]):
        if b.time <= t_stop + 1e-9:
            out.append(b)
            continue
        if a.time < t_stop:
            f = (t_stop - a.time) / (b.time - a.time)
            p = (a.pos[0] + f * (b.pos[0] - a.pos[0]), a.pos[1] + f * (b.pos[1] - a.pos[1]))
            out.append(RobotState(p, a.vel, t_stop))
        break
    return out


@dataclass
class ExecutedRun:
    waypoints: list[RobotState]
    expected_cost: float
    actual_cost: float
    cycles: int
    reached: bool

    @property
    def arrival_time(self) -> float:
        return self.waypoints[-1].time


def _append(path: list[RobotState], part: Sequence[RobotState]) -> None:
    for w in part:
        if path and abs(w.time - path[-1].time) < 1e-12:
            continue
        path.append(w)


def plan_online(
    cfg: PlanConfig,
    predictor: Predictor,
    world: FieldSequence,
    x_curr,
    x_goal,
    k: int,
    start_index: int | None = None,
) -> ExecutedRun:
    """Receding-horizon execution against a ground-truth frame stream.

    Every ``replan_interval`` seconds the trailing ``k`` true frames are
    re-predicted and the robot replans from its current space-time state,
    then follows the new plan for one interval. The unexecuted rest of the
    previous plan is kept in each new roadmap, so a replan never does worse
    than carrying on under the new forecast. ``expected_cost`` sums each
    executed piece under the prediction it was planned with; ``actual_cost``
    evaluates the whole executed path against ``world``.
    """
    dt = world.spec.frame_dt
    step_frames = int(round(cfg.replan_interval / dt))
    if step_frames < 1 or abs(step_frames * dt - cfg.replan_interval) > 1e-9:
        raise ValueError("replan_interval must be a whole number of frames")
    idx = world.start_index + k - 1 if start_index is None else start_index
    pos = (float(x_curr[0]), float(x_curr[1]))
    path: list[RobotState] = []
    rest: list[RobotState] = []
    expected = 0.0

    def finish(reached: bool, cycles: int) -> ExecutedRun:
        if len(path) < 2:
            t = path[-1].time if path else idx * dt
            return ExecutedRun(path or [RobotState(pos, (0.0, 0.0), t)], expected, 0.0, cycles, reached)
        actual = path_cost(world, [w.pos for w in path], [w.time for w in path], cfg.beta, cfg.dt_int)
        return ExecutedRun(path, expected, actual, cycles, reached)

    for cycle in range(cfg.max_cycles):
        t_now = idx * dt
        if math.dist(pos, x_goal) <= cfg.goal_radius:
            _append(path, [RobotState(pos, (0.0, 0.0), t_now)])
            return finish(True, cycle)
        if idx + 1 > world.end_index or idx - k + 1 < world.start_index:
            break
        observed = world.slice(idx - k + 1, idx + 1)
        plan, seq = plan_once(cfg, predictor, observed, pos, x_goal, seed=[cfg.seed, cycle], via=rest)
        piece = truncate(plan.waypoints, t_now + cfg.replan_interval)
        if len(piece) >= 2:
            expected += path_cost(seq, [w.pos for w in piece], [w.time for w in piece], cfg.beta, cfg.dt_int)
        _append(path, piece)
        last = piece[-1]
        if last.time >= plan.arrival_time - 1e-9:
            return finish(True, cycle + 1)
        if last.time < t_now + cfg.replan_interval - 1e-9:
            # plan ended early without reaching a goal node; cannot happen for valid plans
            break
        pos = last.pos
        rest = [w for w in plan.waypoints if w.time > last.time + 1e-9]
        idx += step_frames
    raise PlanningTimeout(f"goal not reached within {cfg.max_cycles} cycles", finish(False, cfg.max_cycles))


def execute_once(
    cfg: PlanConfig, predictor: Predictor, world: FieldSequence, x_curr, x_goal, k: int, start_index: int | None = None
) -> ExecutedRun:
    """Plan once and follow that plan to the end; costs as in :func:`plan_online`."""
    idx = world.start_index + k - 1 if start_index is None else start_index
    observed = world.slice(idx - k + 1, idx + 1)
    plan, _ = plan_once(cfg, predictor, observed, x_curr, x_goal)
    wp = plan.waypoints
    actual = path_cost(world, [w.pos for w in wp], [w.time for w in wp], cfg.beta, cfg.dt_int) if len(wp) > 1 else 0.0
    return ExecutedRun(wp, plan.expected_cost, actual, 1, True)


def plan_jsonl(run: ExecutedRun | Plan, actual_cost: float | None = None) -> str:
    """JSON lines: one ``{t, x, y}`` per waypoint, then a summary record."""
    lines = [json.dumps({"t": w.time, "x": w.pos[0], "y": w.pos[1]}) for w in run.waypoints]
    if isinstance(run, ExecutedRun):
        summary = {"expected_cost": run.expected_cost, "actual_cost": run.actual_cost, "arrival_T": run.arrival_time}
    else:
        summary = {"expected_cost": run.expected_cost, "actual_cost": actual_cost, "arrival_T": run.arrival_time}
    lines.append(json.dumps(summary))
    return "\n".join(lines) + "\n"


def read_plan_jsonl(text: str) -> tuple[list[RobotState], dict]:
    waypoints, summary = [], {}
    for line in text.splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        if "t" in rec:
            waypoints.append(RobotState((rec["x"], rec["y"]), (0.0, 0.0), rec["t"]))
        else:
            summary = rec
    return waypoints, summary
