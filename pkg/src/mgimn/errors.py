"""Exception types shared across the package."""


class MgimnError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ShapeError(MgimnError, ValueError):
    pass


class ConfigError(MgimnError, ValueError):
    exit_code = 1


class DataError(MgimnError, ValueError):
    exit_code = 2


class ParseError(DataError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SamplingError(DataError):
    pass


class StateError(MgimnError, RuntimeError):
    pass


class LoadError(DataError):
    pass


class CheckFailure(MgimnError):
    exit_code = 3
