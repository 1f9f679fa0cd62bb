"""Exception hierarchy shared across the package.

Validation-type errors map to CLI exit status 1, numeric failures to 2.
"""


class SurrogateError(Exception):
    """Base class for all package errors."""


class ValidationError(SurrogateError, ValueError):
    """Bad input, configuration or file contents."""


class DimensionError(ValidationError):
    pass


class InvariantError(ValidationError):
    pass


class ParameterError(ValidationError):
    pass


class ConfigError(ValidationError):
    pass


class FormatError(ValidationError):
    """Magic, version or truncation problems in a binary file."""


class ChecksumError(FormatError):
    pass


class GenerationError(SurrogateError):
    """Random configuration could not be produced within the rejection budget."""


class StateError(SurrogateError, RuntimeError):
    pass


class NumericError(SurrogateError, ArithmeticError):
    pass


class SolverError(NumericError):
    def __init__(self, message, residual=float("nan"), iterations=0):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations
