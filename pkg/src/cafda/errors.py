"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`CafdaError`.
The ``exit_code`` attribute is what the command line maps the error to.
"""


class CafdaError(Exception):
    exit_code = 1


class ConfigError(CafdaError, ValueError):
    """Bad model specification, config file or argument."""

    exit_code = 2


class SpecError(ConfigError):
    """A model term is unknown or references an unknown covariate."""


class DataError(CafdaError, ValueError):
    exit_code = 3


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class ValidationError(DataError):
    pass


class EmptyDataError(DataError):
    """Nothing left to work with after filtering or dropping missing rows."""


class DomainError(DataError):
    """Evaluation point outside a basis domain."""


class DensityError(DataError):
    """Day too sparse for score estimation by numerical integration."""


class NumericError(CafdaError, ArithmeticError):
    exit_code = 4


class ArchiveError(CafdaError):
    exit_code = 3
