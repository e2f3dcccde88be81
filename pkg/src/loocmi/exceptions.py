"""Exception hierarchy.

The CLI maps these onto exit codes: ``ConfigError`` -> 1,
``NumericalError`` -> 2.
"""


class LooCMIError(Exception):
    """Base class for all package errors."""


class DomainError(LooCMIError, ValueError):
    """An argument lies outside the domain of the operation."""


class ConfigError(LooCMIError, ValueError):
    """An experiment or trainer configuration is invalid."""


class NumericalError(LooCMIError, ArithmeticError):
    """A factorization or solve failed, or a non-finite value appeared."""


class ParseError(LooCMIError, ValueError):
    """A CSV or config file could not be parsed."""

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where += f"{path}"
        if line is not None:
            where += f":{line}"
        super().__init__(f"{where}: {message}" if where else message)
