"""Exception hierarchy shared across the package."""


class TadformerError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TadformerError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(TadformerError, ValueError):
    """A configuration value is missing, unknown or out of range."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class NumericalError(TadformerError, ArithmeticError):
    """A non-finite value was produced where finite values are required."""


class DataError(TadformerError, ValueError):
    """Input data violates an operation's domain (e.g. label out of range)."""


class UsageError(TadformerError, RuntimeError):
    """An API was called in an unsupported way."""


class UnsupportedHostError(TadformerError, TypeError):
    """A LoRA merge was requested on a host that is not a plain linear layer."""


class CheckpointError(TadformerError, IOError):
    """Base class for checkpoint format problems."""


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointCorruptionError(CheckpointError):
    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset
