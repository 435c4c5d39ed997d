"""Exception types shared across the package."""


class SolverError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(SolverError):
    """Invalid or inconsistent run configuration."""


class NumericalError(SolverError):
    """Non-finite value produced where a finite one is required."""


class AssumptionError(SolverError):
    """A structural hypothesis (e.g. nondegenerate diffusion) is violated."""


class StructureError(SolverError):
    """Operation called on a problem lacking the required control structure."""


class OracleError(SolverError):
    """Reference solver failed (non-stabilizable system, singular grid solve)."""


class UnsupportedComparison(SolverError):
    """No reference solver is applicable to the requested problem."""


class TrainingDiverged(SolverError):
    """Residual training blew up; carries the loss trace seen so far."""

    def __init__(self, message, loss_trace=None):
        super().__init__(message)
        self.loss_trace = list(loss_trace) if loss_trace is not None else []
