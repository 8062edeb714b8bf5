"""Exception types shared across the package."""


class LatticeError(Exception):
    """Base class for all package errors."""


class InvalidInputError(LatticeError, ValueError):
    """Raised when an operation receives malformed or out-of-contract input."""


class ConfigError(LatticeError, ValueError):
    """Raised when a model or run configuration is inconsistent."""


class ParseError(LatticeError, ValueError):
    """Raised when a text file cannot be parsed. Carries the offending line."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(ParseError):
    """Raised when a parsed row does not match the header's declared arity."""


class NonFiniteError(LatticeError, FloatingPointError):
    """Raised when a NaN or Inf shows up during training."""

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op
