"""Exception hierarchy shared across the package."""


class TrajcastError(Exception):
    """Base class for all package errors."""


class DimensionError(TrajcastError, ValueError):
    """Operand shapes do not conform for an array operation."""


class ContractError(TrajcastError, ValueError):
    """A documented precondition of a function was violated."""


class DataError(TrajcastError, ValueError):
    """Input data is malformed or inconsistent."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class TrainingError(TrajcastError, RuntimeError):
    """Training produced a non-finite value."""


class ConfigError(TrajcastError, ValueError):
    """Invalid or missing configuration value.

    ``key`` holds the dotted path of the offending entry when known.
    """

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        if key is not None:
            message = f"{key}: {message}"
        super().__init__(message)
