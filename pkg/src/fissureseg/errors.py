"""Exception types shared across the package."""


class FissureSegError(Exception):
    """Base class for all package errors."""


class ParameterError(FissureSegError, ValueError):
    """A parameter or input shape is outside the accepted range."""


class LabelRangeError(ParameterError):
    """A label value is not below the declared class count."""


class ContractError(FissureSegError, RuntimeError):
    """An API precondition was violated (e.g. backward on a non-scalar)."""


class NumericError(FissureSegError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class DivergenceError(NumericError):
    """Training produced a non-finite loss."""

    def __init__(self, step, message=None):
        self.step = step
        super().__init__(message or f"non-finite loss at step {step}")


class VolumeFormatError(FissureSegError, ValueError):
    """A VVOL file could not be decoded."""

    def __init__(self, message, offset=0, path=None):
        self.offset = offset
        self.path = path
        where = f"{path}: " if path else ""
        super().__init__(f"{where}{message} (byte offset {offset})")


class UndefinedMetricError(FissureSegError, ValueError):
    """A distance metric was requested for an empty mask."""


class SpecError(ParameterError):
    """A phantom specification produces degenerate geometry."""
