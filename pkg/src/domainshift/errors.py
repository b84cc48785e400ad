"""Exception hierarchy shared across the toolkit.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError (and
subclasses) -> 3, NumericError -> 4. Everything else is a bug and
propagates as exit 1.
"""


class DomainShiftError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(DomainShiftError):
    """Invalid configuration value, unknown key, or inconsistent settings."""

    exit_code = 2


class DataError(DomainShiftError):
    """Missing, empty, or malformed input data."""

    exit_code = 3


class FormatError(DataError):
    """A file exists but its bytes do not match the expected format."""


class ShapeError(DataError):
    """Array dimensions incompatible with the requested operation."""


class ContractError(DomainShiftError):
    """An API was called with mismatched state (e.g. a stale forward cache)."""

    exit_code = 1


class NumericError(DomainShiftError):
    """Numeric failure: non-finite values where the contract requires finite."""

    exit_code = 4
