"""Exception hierarchy shared by the solver and the CLI.

The CLI maps these onto its exit-code contract: ConfigError -> 2,
SnapshotFormatError -> 3, SolverError (and subclasses) -> 4,
DiagnosticFailure -> 5.
"""


class CsntError(Exception):
    """Base class for all package errors."""


class ConfigError(CsntError):
    """Invalid, incomplete or unknown configuration."""


class SnapshotFormatError(CsntError):
    """Malformed binary snapshot or snapshot directory."""


class SolverError(CsntError):
    """Base class for numerical failures."""


class CFLViolation(SolverError):
    """Advective time-step restriction violated."""


class NonFiniteError(SolverError):
    """NaN or Inf encountered in a field or a functional value."""


class NegativeDensityError(SolverError):
    """Density dropped below the round-off nonnegativity slack."""


class MaxIterationsExceeded(SolverError):
    """Iteration budget exhausted; carries the best iterate found."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class NoConvergence(SolverError):
    """Fixed-point iteration did not reach tolerance; carries the best iterate."""

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class DiagnosticFailure(CsntError):
    """A diagnostic check produced a FAIL verdict."""
