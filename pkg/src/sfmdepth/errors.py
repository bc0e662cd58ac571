"""Exception types shared across the package."""


class DataError(Exception):
    """Unreadable, missing, or structurally broken input data."""


class ValidationError(DataError):
    """Input parsed but violates an invariant (message names the culprit)."""


class ConfigError(Exception):
    """Bad configuration value or unknown configuration key."""


class NumericalError(Exception):
    """Degenerate or non-finite numerical state."""


class PairSkip(Exception):
    """A frame pair carries no usable supervision and must be dropped."""
