"""Exception and warning hierarchy.

The CLI maps error classes to exit codes: configuration problems exit 2,
data problems exit 3, numerical failures exit 4.
"""

from __future__ import annotations


class CausalBandsError(Exception):
    """Base class for all library errors."""


class ConfigError(CausalBandsError):
    """Invalid configuration or parameters (CLI exit code 2)."""


class DataError(CausalBandsError):
    """Invalid or unusable input data (CLI exit code 3)."""


class NumericError(CausalBandsError):
    """Numerical failure during estimation (CLI exit code 4)."""


# --- configuration ---------------------------------------------------------


class InvalidFoldCount(ConfigError):
    """Fold count K outside [2, min(N, M)]."""


class InvalidCorrelation(ConfigError):
    """Correlation parameter outside (-1, 1)."""


# --- data ------------------------------------------------------------------


class DuplicateCell(DataError):
    """The same (row, column) cell appears more than once."""


class IncompleteGrid(DataError):
    """Some (row, column) cell of the full grid is missing."""


class InvalidTreatment(DataError):
    """Treatment value violates the mode constraint (binary flag expected)."""


class SchemaError(DataError):
    """Malformed file: missing columns, ragged rows, or unparsable fields."""


class EmptyInput(DataError):
    """An operation received an empty collection."""


class DegenerateTreatment(DataError):
    """A subsample contains only one treatment arm."""

    def __init__(self, message: str, block: tuple[int, int] | None = None):
        super().__init__(message)
        self.block = block


class InsufficientArmData(DataError):
    """Too few observations in a treatment arm for the requested fit."""


class InsufficientData(DataError):
    """Too few observations for the requested fit."""


# --- numerics --------------------------------------------------------------


class SingularGram(NumericError):
    """The (possibly ridge-adjusted) Gram matrix could not be factorized."""


class DegenerateVariance(NumericError):
    """A variance needed for studentization is numerically zero."""


class NumericalInstability(NumericError):
    """A quantity that must be nonnegative came out materially negative."""


# --- warnings --------------------------------------------------------------


class RankDeficiencyRisk(UserWarning):
    """Fewer observations than basis functions; the fit may need a ridge."""


class SparseRegionWarning(UserWarning):
    """A kernel evaluation found no mass near the query point."""


EXIT_CODE_BY_ERROR = {
    ConfigError: 2,
    DataError: 3,
    NumericError: 4,
}


def exit_code_for(exc: BaseException) -> int:
    """Return the CLI exit code for a library exception (1 if unknown)."""
    for cls, code in EXIT_CODE_BY_ERROR.items():
        if isinstance(exc, cls):
            return code
    return 1
