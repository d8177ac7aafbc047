"""Feedback Nash equilibria of LQ games with group-sparse feedback gains."""
from .errors import (
    ConfigError,
    DimensionError,
    DivergedRollout,
    GameError,
    MaxIterExceeded,
    NotConverged,
    NumericalBreakdown,
    SingularSystemError,
    SolverFailure,
)
from .gamecore import (
    AffineStrategyProfile,
    Dims,
    LqGame,
    RegularizationWeights,
    Trajectory,
    ValueProfile,
    block_view,
    eval_cost,
    rollout,
)

__version__ = "0.1.0"

__all__ = [
    "AffineStrategyProfile", "ConfigError", "DimensionError", "Dims", "DivergedRollout",
    "GameError", "LqGame", "MaxIterExceeded", "NotConverged", "NumericalBreakdown",
    "RegularizationWeights", "SingularSystemError", "SolverFailure", "Trajectory",
    "ValueProfile", "block_view", "eval_cost", "rollout",
]
