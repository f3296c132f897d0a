"""Exception hierarchy shared by all modules."""


class MMPError(Exception):
    """Base class for every error raised by this package."""


class ConfigurationError(MMPError, ValueError):
    """Invalid geometry, parameters or configuration file content."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class SolverError(MMPError):
    """A propagator failed to advance a state."""


class SolverDivergenceError(SolverError):
    """Non-finite values appeared in the flow state."""


class PressureConvergenceError(SolverError):
    """The pressure solve missed its tolerance within the iteration budget."""

    def __init__(self, message, residual):
        self.residual = residual
        super().__init__(f"{message} (final residual {residual:.3e})")


class ParallelDivergenceError(MMPError):
    """Parareal iteration error grew beyond the abort threshold."""


class SliceFailure(MMPError):
    """A solver failure inside one time slice of a Parareal iteration."""

    def __init__(self, slice_index, iteration, cause):
        self.slice_index = slice_index
        self.iteration = iteration
        self.cause = cause
        super().__init__(
            f"slice {slice_index} failed in iteration {iteration}: {cause}")


class AggregationError(MMPError):
    """Run directories that cannot be merged into one report."""
