"""Exception hierarchy shared across the package.

The CLI maps these to exit codes: ConfigError -> 3, everything else -> 1.
"""


class LatsegError(Exception):
    """Base class for all package errors."""


class ConfigError(LatsegError):
    """Invalid configuration value; the message names the offending field."""


class ShapeError(LatsegError):
    """Dimension or shape mismatch between arrays/tensors."""


class StateError(LatsegError):
    """Operation applied to an object in the wrong state."""


class NumericsError(LatsegError):
    """Numerical-domain violation (division by vanishing factor, non-finite loss)."""


class DataError(LatsegError):
    """Dataset ingestion or validation failure."""


class ContractError(LatsegError):
    """Structural contract violation, e.g. alignment parameters in an inference bundle."""
