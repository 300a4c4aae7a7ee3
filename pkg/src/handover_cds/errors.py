"""Exception hierarchy shared across the package."""


class HandoverCdsError(Exception):
    """Base class for every error raised by this package."""


class InputError(HandoverCdsError, ValueError):
    """Caller violated a documented precondition (bad shape, bad value)."""


class ModelIntegrityError(HandoverCdsError):
    """A model object is internally inconsistent (non-PD covariance, ...)."""


class FitError(HandoverCdsError):
    """A fitting procedure failed; carries diagnostics for the report."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class ParseError(HandoverCdsError, ValueError):
    """Malformed input file; names the offending line when known."""

    def __init__(self, message, line_number=None):
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)
        self.line_number = line_number


class FormatError(HandoverCdsError, ValueError):
    """Structurally invalid input (empty file, inconsistent dimensions)."""


class IntegrationError(HandoverCdsError):
    """A rollout produced a non-finite state."""


class ProtocolError(HandoverCdsError, ValueError):
    """Malformed wire message; carries the byte offset when known."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset
