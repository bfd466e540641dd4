class BmpcError(Exception):
    """Base class for errors raised by this package."""


class AssumptionViolation(BmpcError):
    """A structural hypothesis (rank of S, nonsingular Gamma, full-rank blocking) fails."""


class InfeasibleProblem(BmpcError):
    """The requested optimization problem has an empty feasible set."""

    def __init__(self, message, infeasibility=None):
        super().__init__(message)
        self.infeasibility = infeasibility


class SolverFailure(BmpcError):
    """The QP solver stopped without a KKT-certified point."""


class EnumerationCapExceeded(BmpcError):
    """Too many lower-level rows for exhaustive complementarity enumeration."""


class ConfigError(BmpcError):
    """Problem configuration is malformed."""
