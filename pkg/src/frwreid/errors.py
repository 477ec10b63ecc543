"""Exception hierarchy shared by every module."""


class FrwReidError(Exception):
    """Base class for all package errors."""


class DimensionError(FrwReidError, ValueError):
    """Operand shapes are incompatible."""


class ContractError(FrwReidError, ValueError):
    """A precondition of an operation was violated."""


class NumericError(FrwReidError, ArithmeticError):
    """A NaN or infinity showed up where a finite value is required."""


class ProtocolError(FrwReidError, ValueError):
    """Evaluation protocol violated (e.g. probe identity missing from gallery)."""


class ConfigError(FrwReidError, ValueError):
    """Invalid or inconsistent configuration."""


class CheckpointError(FrwReidError):
    """Base class for checkpoint read failures."""


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


class DatasetError(FrwReidError, ValueError):
    """Dataset ingestion or validation failure."""
