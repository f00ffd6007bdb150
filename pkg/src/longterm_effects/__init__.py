"""Long-term treatment effects from short A/B trajectories under a shared drifting offset."""

from .core import (
    DatasetError,
    DivergenceError,
    EstimationError,
    ExperimentDataset,
    ObservationTrajectory,
    RewardModel,
    SingularMatrixError,
    TransitionModel,
    estimate_reward_coefficients,
    load_dataset,
    mean_initial_observation,
    save_dataset,
)
from .harness import (
    ConfigError,
    SweepConfig,
    naive_average_estimate,
    run_method,
    summarize,
    sweep,
)
from .nonstationary import (
    ExogenousSeries,
    FitReport,
    NonstationaryConfig,
    alternate_minimize,
    estimate_effects_nonstationary,
    loss,
    solve_exogenous,
    solve_transitions,
    value_nonstationary,
)
from .stationary import estimate_effects_stationary, fit_stationary, value_stationary
from .synthetic import SyntheticTruth, ground_truth_delta, make_truth, simulate_dataset

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetError",
    "DivergenceError",
    "EstimationError",
    "ExogenousSeries",
    "ExperimentDataset",
    "FitReport",
    "NonstationaryConfig",
    "ObservationTrajectory",
    "RewardModel",
    "SingularMatrixError",
    "SweepConfig",
    "SyntheticTruth",
    "TransitionModel",
    "alternate_minimize",
    "estimate_effects_nonstationary",
    "estimate_effects_stationary",
    "estimate_reward_coefficients",
    "fit_stationary",
    "ground_truth_delta",
    "load_dataset",
    "loss",
    "make_truth",
    "mean_initial_observation",
    "naive_average_estimate",
    "run_method",
    "save_dataset",
    "simulate_dataset",
    "solve_exogenous",
    "solve_transitions",
    "summarize",
    "sweep",
    "value_nonstationary",
    "value_stationary",
]
