"""
Exception hierarchy for fogseg.

Every error raised on purpose by the package derives from ``FogSegError`` so the CLI can tell
runtime failures (exit 2) apart from programming errors.
"""

from typing import Any, Optional


class FogSegError(Exception):
    """Base class for all fogseg errors."""


class ShapeError(FogSegError, ValueError):
    """An operation received tensors whose shapes violate its contract."""

    def __init__(self, op: str, dimension: str, expected: Any = None, actual: Any = None,
                 detail: Optional[str] = None) -> None:
        self.op = op
        self.dimension = dimension
        self.expected = expected
        self.actual = actual
        message = f"{op}: bad {dimension}"
        if expected is not None or actual is not None:
            message += f" (expected {expected}, got {actual})"
        if detail:
            message += f": {detail}"
        super().__init__(message)


class NumericalError(FogSegError, ArithmeticError):
    """A forward op produced NaN or infinity from finite inputs (debug mode only)."""


class ConfigError(FogSegError, ValueError):
    pass


class DataError(FogSegError, ValueError):
    pass


class CheckpointError(FogSegError):
    pass


class GradcheckError(FogSegError):
    pass
