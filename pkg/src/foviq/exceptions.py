"""Exception hierarchy shared across the package.

Each class carries the CLI exit code it maps to.
"""


class FoviqError(Exception):
    exit_code = 1


class InvalidArgumentError(FoviqError, ValueError):
    exit_code = 2


class DataError(FoviqError):
    exit_code = 3


class DegenerateError(FoviqError, ArithmeticError):
    """A statistic is undefined, e.g. zero pooled variance or an all-zero curve."""

    exit_code = 4


class NumericalFailureError(FoviqError, ArithmeticError):
    exit_code = 4


class EmptyBankError(InvalidArgumentError):
    """Every Gabor channel fell below the frequency cutoff."""


class UnphysicalParameterWarning(UserWarning):
    pass
