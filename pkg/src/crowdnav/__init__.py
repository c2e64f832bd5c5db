"""Crowd field forecasting and crowd-aware spatiotemporal planning."""

from .fields import (
    CellState,
    CrowdField,
    FieldSequence,
    GridSpec,
    PedObservation,
    Trajectory,
    rasterize_frame,
    rasterize_sequence,
    read_cfld,
    sample_points,
    total_mass,
    write_cfld,
)
from .forecaster import (
    AdvectionPredictor,
    Forecaster,
    ForecasterPredictor,
    LossWeights,
    ModelConfig,
    OmniscientPredictor,
    PersistencePredictor,
    density_weighted_loss,
    train,
)
from .invasiveness import RobotState, SegmentCost, segment_cost, trajectory_cost
from .planner import PlanConfig, PlanningInfeasible, PlanningTimeout, execute_once, plan_once, plan_online
from .sim import ScenarioSpec, make_corpus, simulate

__version__ = "0.1.0"
