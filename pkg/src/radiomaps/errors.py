"""Exception types shared across the package.

The CLI maps these onto process exit codes: input problems exit 2,
numerical failures exit 3, I/O failures exit 4.
"""


class InputError(ValueError):
    """Invalid input data, arguments, or configuration."""


class ParseError(InputError):
    """Malformed serialized data; message carries the offending line number."""


class NumericsError(ArithmeticError):
    """Numerical failure: lost positive-definiteness, divergence, degenerate statistic."""
