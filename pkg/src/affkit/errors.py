"""Exception types shared across the package."""


class AffkitError(Exception):
    """Base class for all package errors."""


class DimensionError(AffkitError):
    """Shapes of the operands are incompatible."""


class ContractError(AffkitError):
    """A precondition of an operation was violated."""


class NumericError(AffkitError):
    """Non-finite values where finite ones are required."""


class SchemaError(AffkitError):
    """Stored data disagrees with the declared schema."""


class ParseError(AffkitError):
    """A store file could not be parsed."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyMemoryError(AffkitError):
    """Every sample was filtered out while building a memory."""


class NoCorrespondenceError(AffkitError):
    """The reference contact feature cannot be matched."""


class LeakageError(AffkitError):
    """Test data leaked into the memory used for evaluation."""


class GeometryError(AffkitError):
    """Degenerate camera/surface geometry."""


class TrainingAbort(AffkitError):
    """Training hit a non-finite loss."""

    def __init__(self, message, episode_id=None):
        super().__init__(message)
        self.episode_id = episode_id


class ConfigError(AffkitError):
    """Invalid run configuration."""
