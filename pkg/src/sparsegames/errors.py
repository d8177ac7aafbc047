"""Exception hierarchy shared by the solvers and the CLI."""
from __future__ import annotations


class GameError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(GameError, ValueError):
    """Array shapes disagree with the game dimensions."""

    def __init__(self, message, stage=None, player=None):
        where = []
        if stage is not None:
            where.append(f"stage {stage}")
        if player is not None:
            where.append(f"player {player}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.stage = stage
        self.player = player


class ConfigError(GameError, ValueError):
    """Invalid game description or scenario configuration."""


class SolverError(GameError):
    """A numerical solver failed; carries the stage index when known."""

    stage = None

    def at_stage(self, stage):
        self.stage = stage
        if self.args:
            self.args = (f"{self.args[0]} (stage {stage})",) + self.args[1:]
        return self


class SingularSystemError(SolverError):
    """Stage matrix S_t is numerically singular (no unique Nash equilibrium)."""

    def __init__(self, sigma_min, sigma_max, stage=None):
        super().__init__(
            f"stage system is singular: sigma_min={sigma_min:.3e}, "
            f"sigma_max={sigma_max:.3e}"
        )
        self.sigma_min = sigma_min
        self.sigma_max = sigma_max
        if stage is not None:
            self.at_stage(stage)


class MaxIterExceeded(SolverError):
    def __init__(self, message, residual, solution=None):
        super().__init__(message)
        self.residual = residual
        self.solution = solution


class NumericalBreakdown(SolverError):
    pass


class SolverFailure(SolverError):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class NotConverged(SolverError):
    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace


class DivergedRollout(SolverError):
    def __init__(self, stage):
        super().__init__(f"rollout produced non-finite state at stage {stage}")
        self.stage = stage
