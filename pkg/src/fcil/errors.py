"""Exception types shared across the toolkit."""


class ShapeError(ValueError):
    """Array shapes do not match what an operation requires."""


class FormatError(ValueError):
    """A binary file is malformed (bad magic, version, or truncation)."""


class ValidationError(ValueError):
    """Data violates a dataset invariant (NaN rows, label/task conflicts)."""


class NumericError(ArithmeticError):
    """A numeric procedure failed (non-finite values, Cholesky breakdown)."""


class StateError(RuntimeError):
    """An object is in the wrong state for the requested operation."""
