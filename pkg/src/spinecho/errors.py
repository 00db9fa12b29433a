"""Exception types and warning categories shared across the package."""

from __future__ import annotations

from dataclasses import dataclass


class SpinEchoError(Exception):
    """Base class for all package errors."""


class InvalidInputError(SpinEchoError):
    """Non-finite or otherwise malformed numerical input."""


class ConfigurationError(SpinEchoError):
    """A constructed object violates one of its invariants."""


class UndefinedPhaseError(SpinEchoError):
    """Phase extraction requested on a state with no transverse polarization."""


class InsufficientDataError(SpinEchoError):
    """Not enough samples for the requested estimate."""


class DataError(SpinEchoError):
    """Statistical input contains non-finite values."""


@dataclass(frozen=True)
class Diagnostic:
    """Location-tagged parser diagnostic.

    code is one of the E_* constants below; line/column are 1-based.
    """

    code: str
    line: int
    column: int
    message: str

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.code}: {self.message}"


class SequenceParseError(ConfigurationError):
    """Raised by the sequence/config parser; always carries a Diagnostic."""

    def __init__(self, diagnostic: Diagnostic):
        super().__init__(str(diagnostic))
        self.diagnostic = diagnostic


E_SYNTAX = "E_SYNTAX"
E_UNKNOWN_SECTION = "E_UNKNOWN_SECTION"
E_UNKNOWN_KEY = "E_UNKNOWN_KEY"
E_UNKNOWN_UNIT = "E_UNKNOWN_UNIT"
E_UNIT_MISMATCH = "E_UNIT_MISMATCH"
E_DUPLICATE_KEY = "E_DUPLICATE_KEY"
E_MISSING_KEY = "E_MISSING_KEY"
E_BAD_VALUE = "E_BAD_VALUE"
E_NEGATIVE_DURATION = "E_NEGATIVE_DURATION"
E_INVARIANT = "E_INVARIANT"


class AdiabaticityWarning(UserWarning):
    """Field program changes direction too fast relative to the Larmor frequency."""


class NoiseBandwidthWarning(UserWarning):
    """Noise bandwidth is not small compared to the Larmor frequency."""
