"""Exception types shared across the package."""


class AhstnError(Exception):
    """Base class for all package-specific errors."""


class ShapeError(AhstnError, ValueError):
    """Operands have incompatible shapes. Messages name both shapes."""


class ParameterError(AhstnError, ValueError):
    """A numeric argument is outside its valid range."""


class NumericalError(AhstnError, ArithmeticError):
    """A computation produced NaN/Inf or an unsolvable linear system."""


class FrozenAssignmentError(AhstnError, RuntimeError):
    """Attempted to update a cluster assignment that is frozen for inference."""


class ConfigError(AhstnError, ValueError):
    """Invalid configuration file, unknown key, or bad CLI usage."""


class ParseError(AhstnError, ValueError):
    """A data file could not be parsed; carries a line number when known."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
