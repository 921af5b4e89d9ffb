"""Exception hierarchy.

Each class carries the CLI exit status it maps to, so the command-line
front end never has to guess how to classify a failure.
"""

from __future__ import annotations


class StatManifoldError(Exception):
    """Base class for all library errors."""

    exit_code = 1


class DomainError(StatManifoldError):
    """Parameter vector outside the open parameter box (or inside its margin)."""


class SupportError(StatManifoldError):
    """Sample point outside the support of the family."""


class FamilyConstructionError(StatManifoldError):
    """A family, expression or spec file could not be built."""

    def __init__(self, message: str, *, x=None, xi=None):
        super().__init__(message)
        self.x = x
        self.xi = xi


class DegeneracyError(StatManifoldError):
    """A metric or Jacobian is (numerically) singular."""

    def __init__(self, message: str, *, direction=None):
        super().__init__(message)
        self.direction = direction


class DimensionError(StatManifoldError):
    """Operands have incompatible shapes."""


class BasePointMismatch(StatManifoldError):
    """Tensors evaluated at different parameter points were combined."""


class IntegrationError(StatManifoldError):
    """The integrand produced NaN at a point carrying probability mass."""

    exit_code = 2

    def __init__(self, message: str, *, x=None):
        super().__init__(message)
        self.x = x


class NonConvergenceError(StatManifoldError):
    """A numerical procedure failed to reach its tolerance."""

    exit_code = 2


class BoundaryError(StatManifoldError):
    """A geodesic left the parameter domain before reaching its end time."""

    exit_code = 2

    def __init__(self, message: str, *, exit_time: float | None = None):
        super().__init__(message)
        self.exit_time = exit_time


class ExperimentError(StatManifoldError):
    """A Monte Carlo experiment discarded too many trials."""

    exit_code = 2
