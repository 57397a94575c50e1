"""Exception types shared across the package."""


class AvparseError(Exception):
    """Base class for all package errors."""


class DimensionError(AvparseError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(AvparseError, ValueError):
    """A configuration value is invalid."""


class ValidationError(AvparseError, ValueError):
    """Input data violates a documented invariant."""


class UsageError(AvparseError, ValueError):
    """An operation was called in a way it does not support."""


class ParseError(AvparseError, ValueError):
    """A file could not be parsed.

    ``location`` carries a line number or byte offset when one is known.
    """

    def __init__(self, message: str, path=None, location=None):
        self.path = path
        self.location = location
        where = ""
        if path is not None:
            where = f"{path}"
            if location is not None:
                where += f":{location}"
            where += ": "
        super().__init__(where + message)


class TrainingError(AvparseError, RuntimeError):
    """Training diverged (non-finite loss)."""
