class AutoOptError(Exception):
    """Base class for every error raised by this package."""


class ShapeMismatchError(AutoOptError, ValueError):
    pass


class NonFiniteError(AutoOptError, FloatingPointError):
    pass


class SingularSystemError(AutoOptError, ArithmeticError):
    pass


class VarianceUndefinedError(AutoOptError, ValueError):
    pass


class BiasCorrectionError(AutoOptError, ValueError):
    pass


class DataFormatError(AutoOptError, ValueError):
    """Bad magic number, truncated file or inconsistent record counts."""


class SubsetSizeError(AutoOptError, ValueError):
    pass


class ParameterCeilingError(AutoOptError, ValueError):
    pass


class ConfigError(AutoOptError, ValueError):
    pass


class DivergenceError(AutoOptError, RuntimeError):
    """Training loss left the allowed band around the initial loss."""

    def __init__(self, step: int, loss: float, initial_loss: float, factor: float):
        self.step = step
        self.loss = loss
        self.initial_loss = initial_loss
        self.factor = factor
        super().__init__(
            f"Diverged at step {step}: loss {loss:.6g} exceeds {factor:g} x initial loss {initial_loss:.6g}"
        )
