"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class DomainError(ValueError):
    """An input lies outside an operation's mathematical domain."""


class ConfigError(ValueError):
    """Inconsistent or unsupported configuration."""


class ValidationError(ValueError):
    """Input data violates a documented contract."""


class FormatError(ValueError):
    """A file could not be parsed; ``offset`` is the byte position when known."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class TrainingError(RuntimeError):
    """Training diverged (non-finite loss)."""
