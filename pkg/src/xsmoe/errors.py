"""Exception hierarchy shared across the package.

Exit-code mapping used by the CLI: ConfigError -> 2, DataError -> 3,
NumericalAbort -> 4. Everything else is a plain bug.
"""


class XsmoeError(Exception):
    """Base class for all package errors."""


class ShapeError(XsmoeError):
    """An operation received tensors whose shapes do not conform."""


class ContractError(XsmoeError):
    """A documented precondition or invariant was violated by the caller."""


class ConfigError(XsmoeError):
    """Invalid or inconsistent run configuration."""


class DataError(XsmoeError):
    """Malformed input file, missing features, or broken cache."""


class NumericalAbort(XsmoeError):
    """Non-finite values encountered during training; the window is aborted."""
