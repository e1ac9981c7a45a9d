"""Exception types shared across the package."""


class CagError(Exception):
    """Base class for all package errors."""


class DimensionError(CagError, ValueError):
    pass


class ContractError(CagError, RuntimeError):
    pass


class DegenerateInputError(CagError, ValueError):
    pass


class ConfigError(CagError, ValueError):
    pass


class NumericError(CagError, FloatingPointError):
    """Raised when a NaN/Inf shows up in a loss or gradient."""


class CheckpointError(CagError, OSError):
    """Checkpoint file that cannot be read or decoded."""
