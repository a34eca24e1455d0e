"""Shared exception types.

Every error raised on a bad call names the offending values; callers and the
CLI map these onto exit code 1 (runtime) while argparse handles usage (2).
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible; the message names both shapes."""


class ParameterError(ValueError):
    """A numeric argument is outside its documented domain."""


class ConfigError(ValueError):
    """An inconsistent or unknown configuration combination."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but degenerate (constant depth, empty corpus)."""


class NonFiniteError(ArithmeticError):
    """A forward op produced NaN/Inf while finite checks were enabled."""
