"""Exception hierarchy shared across the package.

The CLI maps each family to its own exit code, so new exceptions should
subclass one of the three roots below.
"""


class ConfigError(ValueError):
    """Invalid configuration, spec, or argument combination."""


class DataError(ValueError):
    """Input data is malformed, inconsistent, or missing."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite values or is undefined."""


class DataIntegrityError(DataError):
    pass


class FormatError(DataError):
    pass


class CoverageError(DataError):
    pass


class SpecError(ConfigError):
    pass


class UndefinedCorrelationError(NumericalError):
    pass


class DegenerateTestError(NumericalError):
    pass


class TrainingDivergedError(NumericalError):
    """Raised when a training loss turns non-finite; carries the partial history."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = history
