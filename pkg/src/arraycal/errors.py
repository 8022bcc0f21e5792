# Licensed under the MIT License.
"""Exceptions raised by arraycal. The CLI maps them onto exit codes."""


class ArrayCalError(Exception):
    """Base class for all arraycal errors."""


class ConfigError(ArrayCalError, ValueError):
    """Invalid configuration or violated precondition on user input."""


class DimensionError(ConfigError):
    """Incompatible sizes, e.g. as many sources as antennas."""


class NormalizationError(ArrayCalError, ZeroDivisionError):
    """Steering vectors are undefined because every antenna gain is zero."""


class DegenerateDoAError(ArrayCalError, RuntimeError):
    """Could not draw source directions satisfying the minimum separation."""


class NumericalError(ArrayCalError, ArithmeticError):
    """A numerical routine failed or produced non-finite values."""

    def __init__(
        self, message: str, *, residual: float | None = None, batch_index: int | None = None
    ) -> None:
        super().__init__(message)
        self.residual = residual
        self.batch_index = batch_index
