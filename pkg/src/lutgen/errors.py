"""Exception types shared across the package.

The CLI maps these onto exit codes: :class:`InputError` -> 2,
:class:`FormatError` -> 3, :class:`NumericError` -> 4.
"""

from __future__ import annotations


class LutgenError(Exception):
    """Base class for all errors raised by this package."""


class InputError(LutgenError, ValueError):
    """Invalid argument or missing/inconsistent input."""


class InvalidResolutionError(InputError):
    pass


class InvalidParameterError(InputError):
    pass


class DimensionMismatchError(InputError):
    pass


class FormatError(LutgenError, ValueError):
    """Malformed file content. Carries an optional 1-based line number."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class MissingSizeError(FormatError):
    pass


class TruncationError(FormatError):
    pass


class ParseError(FormatError):
    pass


class UnsupportedVariantError(FormatError):
    pass


class UnsupportedFormatError(FormatError):
    pass


class TokenFormatError(FormatError):
    pass


class CodebookMismatchError(FormatError):
    pass


class ConfigError(InputError):
    """Raised with every invalid key listed, not just the first."""

    def __init__(self, problems: list[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration: " + "; ".join(self.problems))


class NumericError(LutgenError, ArithmeticError):
    """Non-finite loss, ratio overflow or a degenerate numeric input."""


class ZeroVarianceError(NumericError):
    pass


class RewardUnavailableError(LutgenError, RuntimeError):
    pass
