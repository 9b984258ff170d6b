"""Exception types shared across the package."""


class RemoteNetError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(RemoteNetError):
    """Invalid configuration, preset, flag, or config file."""


class ShapeError(RemoteNetError):
    """Tensor shape violates an operation's contract."""


class NumericError(RemoteNetError):
    """Non-finite values where finite ones are required."""


class DataError(RemoteNetError):
    """Dataset ingestion failure (missing pair, corrupt tile, bad label)."""


class CheckpointError(RemoteNetError):
    """Checkpoint save/load failure or model mismatch."""


class DivergenceError(RemoteNetError):
    """Training loss became non-finite."""
