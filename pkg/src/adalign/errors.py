"""Exception hierarchy shared by every adalign module."""


class AdalignError(Exception):
    """Base class for all library errors."""


class ContractError(AdalignError, ValueError):
    """An operation was called outside its documented preconditions."""


class DimensionError(ContractError):
    """Tensor or matrix shapes do not conform."""


class DomainError(ContractError):
    """A numeric argument lies outside the domain of the function."""


class ConfigError(AdalignError, ValueError):
    """Invalid hyperparameter or configuration value."""


class SpecError(ConfigError):
    """Invalid synthetic-graph specification."""


class FormatError(AdalignError, ValueError):
    """A file could not be parsed. ``line`` is 1-based when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class RangeError(AdalignError, ValueError):
    """An index or label is out of range."""


class ConsistencyError(AdalignError, ValueError):
    """Two inputs that must agree (e.g. row counts) do not."""


class TrainingAborted(AdalignError, RuntimeError):
    """Raised when a training step produces a non-finite loss."""

    def __init__(self, message: str, record: dict | None = None):
        super().__init__(message)
        self.record = record or {}
