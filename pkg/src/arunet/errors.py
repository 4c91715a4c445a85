"""Error taxonomy shared by the engine, the data layer and the CLI.

The CLI maps these onto distinct exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(EngineError, ValueError):
    """Operands have incompatible shapes, ranks or dtypes."""


class ConfigError(EngineError, ValueError):
    """A configuration value violates a documented constraint."""


class DataError(EngineError, ValueError):
    """A file or in-memory dataset is malformed."""


class NumericError(EngineError, ArithmeticError):
    """A computation produced or encountered non-finite values."""


class CheckpointError(DataError):
    """A checkpoint stream is truncated, mismatched or inconsistent."""
