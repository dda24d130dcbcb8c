"""Exception types shared across the package.

The CLI maps these onto exit codes: DataError and subclasses are exit 2,
NumericalError is exit 3, everything else surfaces as usage/internal errors.
"""


class DimensionError(ValueError):
    """Array shapes are inconsistent with an operation's contract."""


class DegenerateInputError(ValueError):
    """Input is structurally valid but degenerate (zero-norm row, all-zero plan column)."""


class StateError(RuntimeError):
    """Operation called out of order, e.g. backward without a recorded forward."""


class NumericalError(ArithmeticError):
    """Non-finite values appeared where finite ones are required."""


class DataError(Exception):
    """Dataset-level problem: missing controls, malformed file, bad vocabulary."""


class ParseError(DataError):
    """Malformed input file; carries a 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class VocabularyError(DataError):
    """Condition id or name outside the registered vocabulary."""


class SplitError(DataError):
    """Train/test split came out empty; try a different seed."""
