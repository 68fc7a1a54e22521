"""Exception types shared across the package."""


class InvalidInput(ValueError):
    """Raised when an argument violates an operation's preconditions."""


class FormatError(ValueError):
    """Raised on malformed on-disk data. Carries the byte offset where parsing failed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SingularFit(RuntimeError):
    """Raised when a least-squares fit is degenerate (e.g. collinear correspondences)."""
