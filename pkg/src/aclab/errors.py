"""Exception types shared across the package."""

from __future__ import annotations


class AclabError(Exception):
    """Base class for all package-specific errors."""


class ConfigurationError(AclabError):
    """A system, mesh, decomposition or study was set up inconsistently."""


class RangeViolationError(AclabError):
    """A finite-difference stencil was requested outside the interaction range."""


class PotentialDomainError(AclabError):
    """A pair potential was evaluated outside its domain of definition."""


class NumericalError(AclabError):
    """A linear solve or eigenvalue computation failed."""


class NonconvergenceError(AclabError):
    """An iterative solve hit its iteration budget.

    Carries the best iterate and its report so callers can inspect
    partial results.
    """

    def __init__(self, message, best_x=None, report=None):
        super().__init__(message)
        self.best_x = best_x
        self.report = report
