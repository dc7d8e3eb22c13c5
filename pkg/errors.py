"""Exceptions raised across prism-rm.

Every error derives from PrismError so the CLI can map the whole family
onto exit codes in one place (see app.py).
"""


class PrismError(Exception):
    """Base class for all prism-rm errors."""


class ShapeError(PrismError):
    """Dimension mismatch in a primitive, a model or a checkpoint."""

    def __init__(self, primitive, dims, detail=None):
        self.primitive = primitive
        self.dims = [tuple(d) for d in dims]
        message = f"{primitive}: incompatible dims {self.dims}"
        if detail:
            message = f"{message} ({detail})"
        super().__init__(message)


class DomainError(PrismError):
    """Input outside the domain of a primitive (log of 0, empty mask, ...)."""


class UsageError(PrismError):
    """API or CLI called in a way that can never succeed."""


class ConfigError(PrismError):
    """Invalid configuration value, unknown key or missing path."""


class DataError(PrismError):
    """Invalid sequence or preference-pair data."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FormatError(PrismError):
    """Malformed binary file (embeddings or checkpoint)."""

    def __init__(self, message, offset=None):
        self.offset = offset
        if offset is not None:
            message = f"{message} at byte offset {offset}"
        super().__init__(message)


class NumericError(PrismError):
    """Non-finite values during training or a failed gradient check."""


class NonDeterminismError(NumericError):
    """A function expected to be deterministic returned different values."""
