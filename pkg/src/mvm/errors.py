"""Exception types shared across the package.

The CLI maps these onto exit codes: ``ValueError`` subclasses are usage
errors (1), ``NumericalError`` is a numerical failure (2) and
``FormatError`` / ``OSError`` are I/O problems (3).
"""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class NumericalError(ArithmeticError):
    """A NaN/Inf appeared where a finite value is required."""


class OracleFailure(NumericalError):
    """The finite-difference oracle could not produce a finite estimate."""


class FormatError(IOError):
    """A dataset or checkpoint file is malformed, truncated or corrupted."""


class LexiconError(ValueError):
    """A lexicon specification cannot be realised."""
