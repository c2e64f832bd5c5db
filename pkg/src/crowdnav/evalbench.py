"""Prediction and planning metrics, latency benchmark, result tables."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from .fields import RHO, SIGMA2, VX, VY, FieldSequence
from .planner import PlanningInfeasible, PlanningTimeout


class MetricError(ValueError):
    pass


@dataclass(frozen=True)
class Stat:
    mean: float
    std: float
    n: int

    def __str__(self) -> str:
        return f"{self.mean:.4f} ± {self.std:.4f}"


def mean_std(values: Sequence[float]) -> Stat:
    """Mean and population standard deviation (two-pass)."""
    v = np.asarray(values, dtype=float)
    if len(v) == 0:
        return Stat(float("nan"), float("nan"), 0)
    m = float(np.mean(v))
    return Stat(m, float(np.sqrt(np.mean((v - m) ** 2))), len(v))


@dataclass(frozen=True)
class PredictionMetrics:
    density_mae: float
    velocity_mae: float
    variance_mae: float


def prediction_metrics(pred: FieldSequence | np.ndarray, target: FieldSequence | np.ndarray) -> PredictionMetrics:
    """Errors over non-empty target cells.

    Density error is a plain mean over those cells; velocity (L1 norm of the
    2-vector error) and variance errors are weighted by target density.
    """
    p = pred.data if isinstance(pred, FieldSequence) else np.asarray(pred, dtype=float)
    t = target.data if isinstance(target, FieldSequence) else np.asarray(target, dtype=float)
    if p.shape != t.shape:
        raise MetricError(f"prediction {p.shape} and target {t.shape} differ")
    rho = t[..., RHO]
    v = rho > 0
    if not v.any():
        raise MetricError("target has no non-empty cells")
    w = rho[v]
    density = float(np.mean(np.abs(p[..., RHO][v] - w)))
    vel_err = np.abs(p[..., VX][v] - t[..., VX][v]) + np.abs(p[..., VY][v] - t[..., VY][v])
    velocity = float(np.sum(w * vel_err) / np.sum(w))
    variance = float(np.sum(w * np.abs(p[..., SIGMA2][v] - t[..., SIGMA2][v])) / np.sum(w))
    return PredictionMetrics(density, velocity, variance)


@dataclass(frozen=True)
class PredictionSummary:
    name: str
    density_mae: Stat
    velocity_mae: Stat
    variance_mae: Stat


def summarize_predictions(name: str, metrics: Sequence[PredictionMetrics]) -> PredictionSummary:
    return PredictionSummary(
        name,
        mean_std([m.density_mae for m in metrics]),
        mean_std([m.velocity_mae for m in metrics]),
        mean_std([m.variance_mae for m in metrics]),
    )


def horizon_metrics(pred: FieldSequence, target: FieldSequence, horizon: int) -> PredictionMetrics:
    """Metrics on the frame ``horizon`` steps ahead (1-based)."""
    return prediction_metrics(pred.data[horizon - 1], target.data[horizon - 1])


def evaluate_windows(
    predict: Callable[[FieldSequence, int], FieldSequence],
    windows: Sequence,
    horizon: int | None = None,
) -> PredictionMetrics:
    """Mean metrics over dataset windows.

    With ``horizon`` only that lead time is scored, otherwise every target frame.
    """
    if not windows:
        raise MetricError("no windows to evaluate")
    scores = []
    for w in windows:
        tau = len(w.target)
        pred = predict(w.input, tau)
        if len(pred) != tau:
            raise MetricError(f"predictor returned {len(pred)} frames, expected {tau}")
        if horizon is None:
            scores.append(prediction_metrics(pred, w.target))
        elif np.any(w.target.data[horizon - 1, ..., RHO] > 0):
            scores.append(horizon_metrics(pred, w.target, horizon))
    if not scores:
        raise MetricError(f"no window has pedestrians at horizon {horizon}")
    return PredictionMetrics(
        float(np.mean([m.density_mae for m in scores])),
        float(np.mean([m.velocity_mae for m in scores])),
        float(np.mean([m.variance_mae for m in scores])),
    )


@dataclass(frozen=True)
class Timing:
    mean: float
    std: float
    max: float
    n: int


def benchmark_inference(
    forward: Callable[[], object], n_trials: int = 100, warmup: int = 5, threads: int = 1
) -> Timing:
    """Wall-clock seconds per call, with BLAS limited to ``threads`` threads."""
    with threadpool_limits(threads):
        for _ in range(warmup):
            forward()
        times = []
        for _ in range(n_trials):
            t0 = time.perf_counter()
            forward()
            times.append(time.perf_counter() - t0)
    arr = np.array(times)
    return Timing(float(arr.mean()), float(arr.std()), float(arr.max()), n_trials)


def benchmark_model(model, height: int = 12, width: int = 36, k: int = 10, tau: int = 10, n_trials: int = 100, seed: int = 0) -> Timing:
    x = np.random.default_rng(seed).random((1, k, 4, height, width)).astype(model.dtype)
    return benchmark_inference(lambda: model.forward_tensor(x, tau), n_trials)


# --------------------------------------------------------------------------
# planning


@dataclass
class PlanningMetrics:
    name: str
    expected_cost: Stat
    actual_cost: Stat
    gap: Stat
    failures: int = 0
    runs: list[tuple[float, float]] = field(default_factory=list)


@dataclass(frozen=True)
class PlanningMethod:
    """``run(scenario, seed)`` returns (expected_cost, actual_cost) or raises on infeasibility."""

    name: str
    run: Callable[[object, int], tuple[float, float]]


def planning_table(methods: Sequence[PlanningMethod], scenarios: Sequence, seeds: Sequence[int]) -> list[PlanningMetrics]:
    if not methods:
        return []
    if not scenarios:
        raise MetricError("planning_table needs at least one scenario")
    rows = []
    for method in methods:
        runs, failures = [], 0
        for scenario in scenarios:
            for seed in seeds:
                try:
                    runs.append(method.run(scenario, seed))
                except (PlanningInfeasible, PlanningTimeout):
                    failures += 1
        exp = [r[0] for r in runs]
        act = [r[1] for r in runs]
        rows.append(
            PlanningMetrics(
                method.name,
                mean_std(exp),
                mean_std(act),
                mean_std([abs(a - b) for a, b in runs]),
                failures,
                runs,
            )
        )
    return rows


# --------------------------------------------------------------------------
# tables


def _group_columns(groups: Sequence[str] | None, n: int) -> list[list[str]]:
    if groups is None:
        return [[] for _ in range(n)]
    if len(groups) != n:
        raise MetricError(f"{len(groups)} group labels for {n} rows")
    return [[g] for g in groups]


def prediction_table_csv(
    rows: Sequence[PredictionSummary], key: str = "model", groups: Sequence[str] | None = None
) -> str:
    """One row per summary; ``groups`` adds a leading scenario column."""
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    head = ["scenario"] if groups is not None else []
    wr.writerow(head + [key, "density_mae", "density_std", "velocity_mae", "velocity_std", "variance_mae", "variance_std"])
    for g, r in zip(_group_columns(groups, len(rows)), rows):
        wr.writerow(
            g
            + [r.name]
            + [f"{x:.6g}" for s in (r.density_mae, r.velocity_mae, r.variance_mae) for x in (s.mean, s.std)]
        )
    return buf.getvalue()


def planning_table_csv(
    rows: Sequence[PlanningMetrics], key: str = "method", groups: Sequence[str] | None = None
) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    head = ["scenario"] if groups is not None else []
    wr.writerow(head + [key, "expected_cost", "expected_std", "actual_cost", "actual_std", "abs_gap", "failures"])
    for g, r in zip(_group_columns(groups, len(rows)), rows):
        wr.writerow(
            g
            + [
                r.name,
                f"{r.expected_cost.mean:.6g}",
                f"{r.expected_cost.std:.6g}",
                f"{r.actual_cost.mean:.6g}",
                f"{r.actual_cost.std:.6g}",
                f"{r.gap.mean:.6g}",
                r.failures,
            ]
        )
    return buf.getvalue()


def aligned_text(csv_text: str) -> str:
    rows = list(csv.reader(io.StringIO(csv_text)))
    if not rows:
        return ""
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"
