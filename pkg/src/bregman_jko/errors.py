#!/usr/bin/env python3
"""
Exception hierarchy for bregman-jko.

Library code raises these; only the command-line layer turns them into
messages and exit codes.
"""

from typing import Any


class BregmanJkoError(Exception):
    """Base class for every error raised by this package."""


# =============================================================================
# GEOMETRY / DOMAIN
# =============================================================================


class DomainError(BregmanJkoError, ValueError):
    """A point lies outside the domain of a cost or potential."""


class OutOfDomain(DomainError):
    """An iterate of a solver left the domain."""


class SingularMetric(BregmanJkoError, ArithmeticError):
    """An induced metric tensor is not positive definite."""


class EmptySample(BregmanJkoError, ValueError):
    """Every sampled pair was skipped, so no estimate can be formed."""


class BoundaryIncompatible(BregmanJkoError, ValueError):
    """A test function violates the Neumann condition at the boundary."""


# =============================================================================
# SOLVERS
# =============================================================================


class NoConvergence(BregmanJkoError, RuntimeError):
    """
    An iterative solver stopped before reaching its tolerance.

    Attributes:
        best: Best iterate found so far (solver-specific type), if any
        iterations: Number of iterations performed
        residual: Final residual, if known
    """

    def __init__(
        self,
        message: str,
        *,
        best: Any = None,
        iterations: int = 0,
        residual: float | None = None,
    ):
        super().__init__(message)
        self.best = best
        self.iterations = iterations
        self.residual = residual


class NumericalUnderflow(BregmanJkoError, ArithmeticError):
    """Scaling vectors under- or overflowed in the kernel domain."""


class SizeCap(BregmanJkoError, ValueError):
    """An exact transport instance exceeds the configured entry cap."""


class DegenerateDensity(BregmanJkoError, ArithmeticError):
    """Mass concentrated in a single cell below the grid resolution."""


class StabilityViolation(BregmanJkoError, ValueError):
    """An explicit time step exceeds the stability bound."""


class NegativeDensity(BregmanJkoError, ArithmeticError):
    """A finite-difference solution lost positivity beyond tolerance."""


# =============================================================================
# CONFIGURATION
# =============================================================================


class ConfigError(BregmanJkoError, ValueError):
    """
    An experiment configuration could not be resolved.

    Attributes:
        diagnostics: Every problem found, not just the first
    """

    def __init__(self, message: str, diagnostics: list[str] | None = None):
        super().__init__(message)
        self.diagnostics = list(diagnostics or [])
