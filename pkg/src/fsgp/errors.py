"""Exception types shared across the package."""


class FSGPError(Exception):
    """Base class for all package errors."""


class ParseError(FSGPError, ValueError):
    """Malformed dataset text. ``lineno`` is 1-based (the header is line 1)."""

    def __init__(self, message, lineno=None):
        if lineno is not None:
            message = f"line {lineno}: {message}"
        super().__init__(message)
        self.lineno = lineno


class NumericError(FSGPError, ArithmeticError):
    """A computation produced non-finite values or failed to factorize.

    ``block`` names the parameter block (or intermediate) at fault.
    """

    def __init__(self, message, block=None):
        if block is not None:
            message = f"[{block}] {message}"
        super().__init__(message)
        self.block = block


class CheckpointError(FSGPError, IOError):
    """Archive is truncated, corrupt, or written by an incompatible version."""
