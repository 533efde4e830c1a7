"""Exception hierarchy.

Every error carries a short ``category`` string so the command-line entry
point can report failures as a single machine-parsable line.
"""


class CLVAEError(Exception):
    category = "error"


class ValidationError(CLVAEError, ValueError):
    category = "validation"


class ParseError(ValidationError):
    category = "parse"

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyInputError(ValidationError):
    category = "empty-input"


class WindowError(ValidationError):
    category = "window"


class CoverageError(ValidationError):
    category = "coverage"


class AssignmentError(ValidationError):
    category = "assignment"


class ShapeError(ValidationError):
    category = "shape"


class AlignmentError(ValidationError):
    category = "alignment"


class ConfigError(ValidationError):
    category = "config"


class DomainError(ValidationError):
    category = "domain"


class DegenerateDataError(ValidationError):
    category = "degenerate-data"


class LeakageError(CLVAEError):
    category = "leakage"


class NumericalError(CLVAEError, ArithmeticError):
    category = "numerical"


class ConvergenceError(NumericalError):
    category = "convergence"


class GradientInstabilityError(NumericalError):
    category = "gradient-instability"


class NotFittedError(CLVAEError, AttributeError):
    category = "not-fitted"
