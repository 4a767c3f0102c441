"""Exception hierarchy shared by all modules.

Each category maps to a CLI exit code (see ``harness.cli``).
"""

from __future__ import annotations


class StefanLabError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ConfigurationError(StefanLabError, ValueError):
    """Invalid parameters, grids too coarse, unknown config keys."""

    exit_code = 2


class DomainError(ConfigurationError):
    """Argument outside the mathematical domain of an operation."""


class NumericalError(StefanLabError, ArithmeticError):
    """Solver failure: non-convergence, step underflow, bad fits."""

    exit_code = 3


class StiffnessError(NumericalError):
    """Adaptive integrator step collapsed below the allowed floor."""

    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


class RegimeError(StefanLabError):
    """A trajectory left the regime an analysis assumes (e.g. non-monotone lambda)."""

    exit_code = 4
