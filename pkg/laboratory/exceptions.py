"""
Error hierarchy for the laboratory.

Every error carries the report code the CLI turns into an exit status:
"01" invariant failure, "02" bad configuration or precondition, "03" numerical failure.
"""
from typing import Any, Optional

from torus_lab.utils.report_utils import (
    CONFIG_ERROR_CODE,
    INVARIANT_FAILURE_CODE,
    NUMERICAL_FAILURE_CODE,
)


class LabError(Exception):
    """Base class for laboratory failures."""

    code = NUMERICAL_FAILURE_CODE

    def __init__(self, message: str, witness: Optional[Any] = None):
        super().__init__(message)
        self.message = message
        self.witness = witness


class ConfigurationError(LabError, ValueError):
    code = CONFIG_ERROR_CODE


class PreconditionError(LabError, ValueError):
    code = CONFIG_ERROR_CODE


class SingularMatrixError(PreconditionError):
    pass


class AsymmetryError(PreconditionError):
    pass


class InfeasibleClassError(PreconditionError):
    pass


class WindowInfeasibleError(PreconditionError):
    pass


class QuadratureError(LabError):
    pass


class NoConvergenceError(LabError):
    pass


class ContinuationStallError(NoConvergenceError):

    def __init__(self, message: str, last_amplitude: float, witness: Optional[Any] = None):
        super().__init__(message, witness)
        self.last_amplitude = last_amplitude


class IntegrationError(LabError):
    """Implicit step did not converge; usually the step is too large."""


class NonClosureError(LabError):
    pass


class RegionViolationError(LabError):
    pass


class BracketNotFoundError(LabError):
    pass


class InvariantViolation(LabError):
    code = INVARIANT_FAILURE_CODE

    def __init__(self, invariant: str, message: str, witness: Optional[Any] = None):
        super().__init__(message, witness)
        self.invariant = invariant
