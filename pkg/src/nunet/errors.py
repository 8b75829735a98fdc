"""Exception types shared across the package."""


class NunetError(Exception):
    """Base class for package errors."""


class ShapeError(NunetError):
    """Tensor or grid dimensions violate an operation's contract."""


class ConfigError(NunetError):
    """Invalid or inconsistent configuration."""


class ContractError(NunetError):
    """Operation invoked outside its stated contract."""


class DataError(NunetError):
    """Malformed or inconsistent dataset contents."""


class CheckpointError(NunetError):
    """Unreadable or incompatible checkpoint file."""


class NonFiniteError(NunetError):
    """NaN or Inf encountered where finite values are required."""
