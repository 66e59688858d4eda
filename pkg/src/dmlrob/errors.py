"""Exception types shared across the toolkit."""


class DmlrobError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(DmlrobError):
    """An array does not have the shape an operation requires."""

    def __init__(self, name, expected, got):
        self.name = name
        self.expected = expected
        self.got = got
        super().__init__(f"{name}: expected shape {expected}, got {got}")


class NumericError(DmlrobError):
    """A computation produced or encountered a non-finite or degenerate value."""


class ConfigError(DmlrobError):
    """Invalid configuration, argument, or CLI input."""


class DataFormatError(DmlrobError):
    """Malformed dataset file."""

    def __init__(self, message, line=None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ResampleBatch(DmlrobError):
    """The batch cannot support the loss (e.g. a single class); draw another one."""
