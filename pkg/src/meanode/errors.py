"""Exception hierarchy shared by the numerics, the experiments and the CLI."""

from __future__ import annotations


class MeanOdeError(Exception):
    """Base class for all meanode errors."""


class ShapeError(MeanOdeError, ValueError):
    """Array shapes inconsistent with a block kind or a network."""


class NonFiniteError(MeanOdeError, ArithmeticError):
    """A state, gradient or loss stopped being finite."""

    def __init__(
        self,
        message: str = "non-finite state",
        *,
        layer: int | None = None,
        iteration: int | None = None,
    ) -> None:
        where = []
        if iteration is not None:
            where.append(f"iteration {iteration}")
        if layer is not None:
            where.append(f"layer {layer}")
        if where:
            message = f"{message} ({', '.join(where)})"
        super().__init__(message)
        self.layer = layer
        self.iteration = iteration


class DivergenceError(NonFiniteError):
    """Training left the finite regime (explosion)."""


class ConfigError(MeanOdeError, ValueError):
    """A configuration is invalid or incompatible with the requested operation."""


class CouplingError(MeanOdeError):
    """Two trajectories that must share initial draws do not."""


class SnapshotError(MeanOdeError, OSError):
    """A snapshot file is missing, truncated or malformed."""


class FitError(MeanOdeError, ValueError):
    """A rate fit is under-determined."""
