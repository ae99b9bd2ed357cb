"""Exception taxonomy shared by every module.

Three failure classes cover the whole package: a configuration that can
never work (bad shapes, bad hyperparameters), a numeric breakdown at run
time (NaN/Inf escaping an operation), and plain API misuse.
"""


class CapsDbnError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CapsDbnError):
    """Shapes or hyperparameters are inconsistent; raised before any work."""


class NumericError(CapsDbnError):
    """A computation produced non-finite values or invalid numeric input."""


class UsageError(CapsDbnError):
    """The API was called in an unsupported order or with stale state."""
