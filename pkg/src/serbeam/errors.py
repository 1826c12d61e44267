"""Exception types shared across the package.

The CLI maps these onto distinct exit codes, so library code should raise
the most specific type that applies rather than bare ValueError.
"""


class SchemaError(ValueError):
    """A configuration document failed validation (bad value, unknown key)."""


class FormatError(RuntimeError):
    """A binary dataset or model file is malformed, truncated, or mismatched."""


class NumericError(ArithmeticError):
    """A numerically degenerate state (zero-norm precoder, dead stream, NaN)."""


class DimensionError(ValueError):
    """Matrix dimensions are inconsistent with the system configuration."""
