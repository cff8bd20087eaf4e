"""Exception taxonomy shared across the package."""


class SegCorrectError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SegCorrectError):
    """Operand dimensions are incompatible with the operation."""


class NumericError(SegCorrectError):
    """Non-finite values where finite ones are required."""


class ContractError(SegCorrectError):
    """An input violates a documented precondition (e.g. not a valid
    probability map, tanh output outside [-1, 1], stale trace)."""


class ConfigError(SegCorrectError):
    """Invalid configuration value or unknown configuration key."""


class DataError(SegCorrectError):
    """Malformed data content (e.g. label id out of range)."""


class FormatError(SegCorrectError):
    """Corrupt or unsupported on-disk file format."""
