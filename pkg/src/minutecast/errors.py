"""Exception hierarchy shared across the engine.

The CLI maps these onto process exit codes: ConfigError -> 1,
DataError -> 2, StorageError -> 3.
"""


class EngineError(Exception):
    """Base class for all minutecast errors."""


class ConfigError(EngineError):
    """Invalid configuration, CLI usage, or unusable resource files."""


class DataError(EngineError):
    """Invalid, malformed, or insufficient input data."""


class NotWarmedUpError(DataError):
    """A stateful stage was asked for output before it had any history."""


class StorageError(EngineError):
    """Log or checkpoint IO failure."""


class CorruptionError(StorageError):
    """Persisted state failed validation (bad CRC, sequence gap)."""
