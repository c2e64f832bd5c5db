"""Command-line entry point: ``crowdnav <subcommand> [flags]``.

Exit codes: 0 success, 2 usage or input error, 3 planning infeasible,
4 planning timeout. Outputs are written to a temporary file and renamed
into place only on success.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import sys
import tempfile
from pathlib import Path
from typing import Sequence

import numpy as np
from threadpoolctl import threadpool_limits

from . import evalbench as ev
from .fields import FieldError, FieldSequence, GridSpec, Trajectory, cfld_bytes, rasterize_sequence, read_cfld
from .forecaster import (
    AdvectionPredictor,
    Forecaster,
    ForecasterPredictor,
    ModelConfig,
    OmniscientPredictor,
    PersistencePredictor,
    load_model,
    model_checkpoint_bytes,
    train,
)
from .ingest import (
    IngestConfig,
    ParseError,
    format_canonical_csv,
    parse_atc_csv,
    parse_canonical_csv,
    time_extent,
    window_dataset,
    window_sequence,
)
from .nn import CheckpointError
from .planner import PlanConfig, PlanningInfeasible, PlanningTimeout, execute_once, plan_jsonl, plan_online, read_plan_jsonl
from .render import ppm_bytes, render_sequence
from .sim import SCENARIO_KINDS, make_corpus, simulate

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_INFEASIBLE = 3
EXIT_TIMEOUT = 4

log = logging.getLogger("crowdnav")


class UsageError(Exception):
    """Bad flags or unreadable input; reported with exit code 2."""


# --------------------------------------------------------------------------
# helpers


def atomic_write(path: str | Path, payload: bytes | str) -> None:
    path = Path(path)
    data = payload.encode("utf-8") if isinstance(payload, str) else payload
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent if str(path.parent) else ".", prefix=f".{path.name}.", suffix=".tmp")
    except OSError as exc:
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except OSError as exc:
        Path(tmp).unlink(missing_ok=True)
        raise UsageError(f"cannot write {path}: {exc.strerror}") from None


def _read_bytes(path: str | Path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None


def _grid(text: str) -> tuple[int, int]:
    try:
        h, w = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like HxW, got {text!r}") from None
    if h < 1 or w < 1:
        raise argparse.ArgumentTypeError("grid dimensions must be positive")
    return h, w


def _floats(n: int):
    def parse(text: str) -> tuple[float, ...]:
        try:
            vals = tuple(float(v) for v in text.split(","))
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}") from None
        if len(vals) != n:
            raise argparse.ArgumentTypeError(f"expected {n} comma-separated numbers, got {text!r}")
        return vals

    return parse


def _positive_int(text: str) -> int:
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _nonneg_int(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def grid_spec(args) -> GridSpec:
    h, w = args.grid
    try:
        return GridSpec(cell_size=args.cell_size, height=h, width=w, frame_dt=args.frame_dt)
    except FieldError as exc:
        raise UsageError(str(exc)) from None


def trajectories_to_fields(trajs, spec: GridSpec) -> FieldSequence:
    """Rasterize on whole frames of absolute time, so frame index f covers [f*dt, (f+1)*dt)."""
    extent = time_extent(trajs)
    if extent is None:
        raise UsageError("trajectory file holds no samples")
    first = int(math.floor(extent[0] / spec.frame_dt))
    last = int(math.floor(extent[1] / spec.frame_dt))
    return rasterize_sequence(trajs, spec, first * spec.frame_dt, last - first + 1, start_index=first)


def load_fields(path: str | Path, spec: GridSpec) -> FieldSequence:
    """Read a CFLD file or a canonical trajectory CSV as a field sequence."""
    raw = _read_bytes(path)
    try:
        if raw[:4] == b"CFLD":
            return read_cfld(raw, spec)
        return trajectories_to_fields(parse_canonical_csv(raw), spec)
    except (FieldError, ParseError) as exc:
        raise UsageError(f"{path}: {exc}") from None


def _load_model(path, k: int, tau: int, spec: GridSpec) -> Forecaster:
    try:
        model, _ = load_model(_read_bytes(path), k, tau, spec.height, spec.width)
    except (CheckpointError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from None
    return model


def make_predictor(name: str, model_path: str | None, k: int, tau: int, spec: GridSpec):
    if model_path is not None:
        return ForecasterPredictor(_load_model(model_path, k, tau, spec))
    if name == "forecaster":
        raise UsageError("--predictor forecaster needs --model")
    return {"persistence": PersistencePredictor, "advection": AdvectionPredictor}[name]()


# --------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    if args.duration < 0:
        raise UsageError("--duration must be non-negative")
    trajs = []
    if args.duration > 0:
        for scenario in make_corpus(args.scenario, args.seed, 1, args.duration, args.rate):
            trajs = simulate(scenario)
    atomic_write(args.out, format_canonical_csv(trajs))
    log.info("wrote %d trajectories to %s", len(trajs), args.out)
    return EXIT_OK


def cmd_ingest(args) -> int:
    spec = grid_spec(args)
    raw = _read_bytes(args.input)
    try:
        if args.format == "atc":
            trajs = parse_atc_csv(raw, args.max_speed, args.crop, args.time_range)
        else:
            if args.crop is not None or args.time_range is not None:
                raise UsageError("--crop and --time-range apply to --format atc only")
            trajs = parse_canonical_csv(raw, args.max_speed)
    except ParseError as exc:
        raise UsageError(f"{args.input}: {exc}") from None
    if args.crop is not None:
        x0, y0 = args.crop[:2]
        trajs = [Trajectory(tr.pid, tr.t, tr.pos - [x0, y0], tr.vel) for tr in trajs]
    outputs: list[tuple[str, bytes | str]] = []
    if args.out:
        outputs.append((args.out, format_canonical_csv(trajs)))
    if args.fields:
        outputs.append((args.fields, cfld_bytes(trajectories_to_fields(trajs, spec))))
    if not outputs:
        raise UsageError("nothing to write: give --out and/or --fields")
    for path, payload in outputs:
        atomic_write(path, payload)
    return EXIT_OK


def _training_windows(paths: Sequence[str], spec: GridSpec, k: int, tau: int, stride: int):
    cfg = IngestConfig(spec=spec, k=k, tau=tau, stride=stride)
    windows = []
    for path in paths:
        raw = _read_bytes(path)
        try:
            if raw[:4] == b"CFLD":
                windows += window_sequence(read_cfld(raw, spec), k, tau, stride)
            else:
                windows += window_dataset(parse_canonical_csv(raw), cfg)
        except (FieldError, ParseError) as exc:
            raise UsageError(f"{path}: {exc}") from None
    return windows


def cmd_train(args) -> int:
    spec = grid_spec(args)
    if spec.height % 4 or spec.width % 4:
        raise UsageError(f"grid {spec.height}x{spec.width} must be divisible by 4 for the forecaster")
    windows = _training_windows(args.data, spec, args.k, args.tau, args.stride)
    if not windows:
        raise UsageError("dataset is empty: no (k + tau)-frame window with pedestrians in its target")
    make = ModelConfig.deep if args.deep else ModelConfig
    config = make(k=args.k, tau=args.tau, height=spec.height, width=spec.width)
    model = Forecaster(config, seed=args.seed)
    result = train(model, windows, args.epochs, lr=args.lr, batch=args.batch, seed=args.seed)
    log_path = args.log or f"{args.out}.loss.csv"
    atomic_write(args.out, model_checkpoint_bytes(result.model, result.weights))
    atomic_write(log_path, result.log_csv())
    final = result.history[-1]
    print(f"windows={len(windows)} initial_val_loss={result.history[0].val_loss:.6g} final_val_loss={final.val_loss:.6g}")
    return EXIT_OK


def _observation(seq: FieldSequence, k: int, at: int | None, label: str) -> FieldSequence:
    end = seq.end_index if at is None else at + 1
    if end - k < seq.start_index or end > seq.end_index:
        raise UsageError(
            f"{label}: needs {k} frames ending at index {end - 1}, has frames {seq.start_index}..{seq.end_index - 1}"
        )
    return seq.slice(end - k, end)


def cmd_predict(args) -> int:
    spec = grid_spec(args)
    seq = load_fields(args.input, spec)
    observed = _observation(seq, args.k, args.at, args.input)
    predictor = make_predictor(args.predictor, args.model, args.k, args.tau, spec)
    pred = predictor.predict(observed, args.tau)
    atomic_write(args.out, cfld_bytes(pred))
    return EXIT_OK


def cmd_plan(args) -> int:
    spec = grid_spec(args)
    world = load_fields(args.world, spec)
    at = args.k - 1 + world.start_index if args.at is None else args.at
    _observation(world, args.k, at, args.world)
    for name, p in (("--start", args.start), ("--goal", args.goal)):
        if not spec.contains(p):
            raise UsageError(f"{name} {p} lies outside the grid")
    try:
        cfg = PlanConfig(
            n_samples=args.n_samples,
            v_max=args.v_max,
            goal_radius=args.goal_radius,
            beta=args.beta,
            T_max=args.t_max,
            replan_interval=args.replan_interval,
            seed=args.seed,
            tau=args.tau,
            max_cycles=args.max_cycles,
        )
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if args.mode == "omniscient":
        predictor = OmniscientPredictor(world)
    else:
        predictor = make_predictor(args.predictor, args.model, args.k, args.tau, spec)
    try:
        if args.mode == "online":
            run = plan_online(cfg, predictor, world, args.start, args.goal, args.k, at)
        else:
            run = execute_once(cfg, predictor, world, args.start, args.goal, args.k, at)
    except PlanningInfeasible as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except PlanningTimeout as exc:
        print(f"timeout: {exc}", file=sys.stderr)
        return EXIT_TIMEOUT
    atomic_write(args.out, plan_jsonl(run))
    print(json.dumps({"mode": args.mode, "expected_cost": run.expected_cost, "actual_cost": run.actual_cost,
                      "arrival_T": run.arrival_time, "cycles": run.cycles}))
    return EXIT_OK


# Start and goal for planning evaluation: across the long axis at mid height.
EVAL_START = (0.1, 0.5)
EVAL_GOAL = (0.9, 0.5)


def _eval_prediction(args, spec: GridSpec) -> str:
    methods = {"persistence": PersistencePredictor(), "advection": AdvectionPredictor()}
    if args.model:
        methods["forecaster"] = ForecasterPredictor(_load_model(args.model, args.k, args.tau, spec))
    rows, groups = [], []
    for kind in args.scenarios:
        per_method: dict[str, list] = {name: [] for name in methods}
        for seed in range(args.seeds):
            scenario = make_corpus(kind, args.seed + 1000 + seed, 1, args.duration)[0]
            world = rasterize_sequence(simulate(scenario), spec, 0.0, int(args.duration / spec.frame_dt))
            windows = window_sequence(world, args.k, args.tau, stride=args.tau)
            if not windows:
                raise UsageError(f"scenario {kind} yields no evaluation windows; raise --duration")
            for name, predictor in methods.items():
                per_method[name].append(ev.evaluate_windows(predictor.predict, windows))
        for name, metrics in per_method.items():
            rows.append(ev.summarize_predictions(name, metrics))
            groups.append(kind)
    return ev.prediction_table_csv(rows, "method", groups)


def _eval_planning(args, spec: GridSpec) -> str:
    predictor = make_predictor(args.predictor, args.model, args.k, args.tau, spec)
    x0, y0, x1, y1 = spec.bounds
    start = (x0 + EVAL_START[0] * (x1 - x0), y0 + EVAL_START[1] * (y1 - y0))
    goal = (x0 + EVAL_GOAL[0] * (x1 - x0), y0 + EVAL_GOAL[1] * (y1 - y0))
    n_frames = int(args.duration / spec.frame_dt)

    def world_of(kind: str, seed: int) -> FieldSequence:
        scenario = make_corpus(kind, seed, 1, args.duration)[0]
        return rasterize_sequence(simulate(scenario), spec, 0.0, n_frames)

    def method(mode: str):
        def run(kind: str, seed: int) -> tuple[float, float]:
            world = world_of(kind, seed)
            cfg = PlanConfig(n_samples=args.n_samples, seed=seed, tau=args.tau, T_max=args.t_max)
            if mode == "omniscient":
                r = execute_once(cfg, OmniscientPredictor(world), world, start, goal, args.k)
            elif mode == "online":
                r = plan_online(cfg, predictor, world, start, goal, args.k)
            else:
                r = execute_once(cfg, predictor, world, start, goal, args.k)
            return r.expected_cost, r.actual_cost

        return ev.PlanningMethod(mode, run)

    seeds = [args.seed + s for s in range(args.seeds)]
    rows, groups = [], []
    for kind in args.scenarios:
        for row in ev.planning_table([method(m) for m in ("omniscient", "once", "online")], [kind], seeds):
            rows.append(row)
            groups.append(kind)
    return ev.planning_table_csv(rows, "method", groups)


def cmd_eval(args) -> int:
    spec = grid_spec(args)
    table = _eval_prediction(args, spec) if args.table == "prediction" else _eval_planning(args, spec)
    atomic_write(args.out, table)
    sys.stdout.write(ev.aligned_text(table))
    return EXIT_OK


def cmd_render(args) -> int:
    spec = grid_spec(args)
    seq = load_fields(args.fields, spec)
    plans = []
    for path in args.plan or []:
        try:
            waypoints, _ = read_plan_jsonl(_read_bytes(path).decode("utf-8"))
        except (ValueError, KeyError) as exc:
            raise UsageError(f"{path}: not a plan file ({exc})") from None
        plans.append((np.array([w.time for w in waypoints]), np.array([w.pos for w in waypoints]).reshape(-1, 2)))
    images = render_sequence(seq, plans, scale=args.scale)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create {out}: {exc.strerror}") from None
    for i, img in enumerate(images):
        atomic_write(out / f"frame_{seq.start_index + i:04d}.ppm", ppm_bytes(img))
    print(f"wrote {len(images)} images to {out}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("global options")
    g.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    g.add_argument("--grid", type=_grid, default=(12, 36), metavar="HxW", help="grid rows x columns (default 12x36)")
    g.add_argument("--cell-size", type=float, default=1.0, help="cell edge in meters (default 1)")
    g.add_argument("--frame-dt", type=float, default=1.0, help="seconds per frame (default 1)")
    g.add_argument("--threads", type=_positive_int, default=1, help="BLAS threads (default 1)")
    g.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="crowdnav", description="Crowd field forecasting and crowd-aware planning.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("simulate", parents=[common], help="simulate a synthetic crowd scenario")
    p.add_argument("--scenario", required=True, choices=SCENARIO_KINDS)
    p.add_argument("--duration", type=float, default=120.0, help="seconds (default 120)")
    p.add_argument("--rate", type=float, default=None, help="arrival rate override (agents per second; agent count for blob)")
    p.add_argument("--out", required=True, help="trajectory CSV")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("ingest", parents=[common], help="convert tracker CSV to canonical trajectories and/or fields")
    p.add_argument("--input", required=True)
    p.add_argument("--format", choices=("atc", "canonical"), default="atc")
    p.add_argument("--crop", type=_floats(4), metavar="XMIN,YMIN,XMAX,YMAX", help="meters; output is shifted so XMIN,YMIN is the origin")
    p.add_argument("--time-range", type=_floats(2), metavar="T0,T1", help="seconds")
    p.add_argument("--max-speed", type=float, default=5.0)
    p.add_argument("--out", help="canonical trajectory CSV")
    p.add_argument("--fields", help="CFLD rasterization of the whole time range")
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("train", parents=[common], help="train the forecaster")
    p.add_argument("--data", required=True, nargs="+", help="trajectory CSV or CFLD files")
    p.add_argument("--k", type=_positive_int, default=10, help="observed frames")
    p.add_argument("--tau", type=_positive_int, default=10, help="predicted frames")
    p.add_argument("--stride", type=_positive_int, default=1)
    p.add_argument("--epochs", type=_nonneg_int, default=20)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--batch", type=_positive_int, default=8)
    p.add_argument("--deep", action="store_true", help="3-layer, double-width comparator model")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss log CSV (default OUT.loss.csv)")
    p.set_defaults(func=cmd_train)

    predictors = ("persistence", "advection", "forecaster")

    p = sub.add_parser("predict", parents=[common], help="forecast future fields")
    p.add_argument("--input", required=True, help="CFLD or trajectory CSV")
    p.add_argument("--model", help="checkpoint; implies --predictor forecaster")
    p.add_argument("--predictor", choices=predictors, default="forecaster")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--tau", type=_positive_int, default=10)
    p.add_argument("--at", type=int, help="index of the last observed frame (default: last input frame)")
    p.add_argument("--out", required=True, help="CFLD with TAU frames")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("plan", parents=[common], help="plan and execute a robot path through a crowd")
    p.add_argument("--world", required=True, help="ground-truth CFLD or trajectory CSV")
    p.add_argument("--mode", choices=("once", "online", "omniscient"), default="online")
    p.add_argument("--model", help="forecaster checkpoint")
    p.add_argument("--predictor", choices=predictors, default="persistence")
    p.add_argument("--start", type=_floats(2), required=True, metavar="X,Y")
    p.add_argument("--goal", type=_floats(2), required=True, metavar="X,Y")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--tau", type=_positive_int, default=10)
    p.add_argument("--at", type=int, help="frame index at which the robot starts (default K-1)")
    p.add_argument("--n-samples", type=int, default=2000)
    p.add_argument("--v-max", type=float, default=1.5)
    p.add_argument("--goal-radius", type=float, default=0.5)
    p.add_argument("--beta", type=float, default=1e-4)
    p.add_argument("--t-max", type=float, default=60.0, help="planning horizon in seconds")
    p.add_argument("--replan-interval", type=float, default=1.0)
    p.add_argument("--max-cycles", type=_positive_int, default=200)
    p.add_argument("--out", required=True, help="plan JSON lines")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("eval", parents=[common], help="prediction or planning result tables")
    p.add_argument("--table", choices=("prediction", "planning"), default="prediction")
    p.add_argument("--scenarios", nargs="+", choices=SCENARIO_KINDS, default=list(SCENARIO_KINDS))
    p.add_argument("--seeds", type=_positive_int, default=3)
    p.add_argument("--duration", type=float, default=90.0)
    p.add_argument("--model", help="forecaster checkpoint")
    p.add_argument("--predictor", choices=predictors, default="persistence", help="forecast used by once/online planning")
    p.add_argument("--k", type=_positive_int, default=10)
    p.add_argument("--tau", type=_positive_int, default=10)
    p.add_argument("--n-samples", type=int, default=800)
    p.add_argument("--t-max", type=float, default=60.0)
    p.add_argument("--out", required=True, help="CSV table")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", parents=[common], help="render fields and plans to PPM images")
    p.add_argument("--fields", required=True, help="CFLD or trajectory CSV")
    p.add_argument("--plan", nargs="*", help="plan JSON lines; first drawn green, second black")
    p.add_argument("--scale", type=_positive_int, default=16, help="pixels per cell")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_render)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad flags and 0 on --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        with threadpool_limits(args.threads):
            return args.func(args)
    except UsageError as exc:
        print(f"crowdnav {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
