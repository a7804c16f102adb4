"""Exception types. The CLI maps each family to an exit code."""


class FewShotError(Exception):
    """Base class for all package errors."""


class FormatError(FewShotError, ValueError):
    """Input file does not follow the expected schema or version."""


class DataError(FewShotError, ValueError):
    """Input data is valid syntactically but unusable (too few samples, degenerate...)."""


class NumericError(FewShotError, ArithmeticError):
    """A computation produced non-finite values."""
