"""Iteration-capped nonlinear MPC for 6-DOF spacecraft docking."""

from .dynamics import (DockingTarget, ControlInput, RelativeState, SpacecraftParams, REFERENCE_PARAMS, REFERENCE_STATE,
                       rk4_step)
from .ocp import CostWeights, DecisionVector, InputBounds, OcpInstance, build_instance, warm_start_from
from .sim import (Episode, PerturbationModel, ScenarioConfig, TrajectoryLog, monte_carlo, run_episode, run_interleaved,
                  timing_report)
from .solver import SolveOutcome, SolverConfig, solve
from .spatial_math import Quaternion

__version__ = "0.1.0"

__all__ = [
    "ControlInput", "CostWeights", "DecisionVector", "DockingTarget", "InputBounds", "OcpInstance",
    "Episode", "PerturbationModel", "Quaternion", "RelativeState", "ScenarioConfig", "SolveOutcome", "SolverConfig",
    "SpacecraftParams", "REFERENCE_PARAMS", "REFERENCE_STATE", "TrajectoryLog", "build_instance", "monte_carlo",
    "rk4_step", "run_episode", "run_interleaved", "solve", "timing_report", "warm_start_from",
]
