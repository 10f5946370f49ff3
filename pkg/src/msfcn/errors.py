"""Exception types shared across the engine."""


class EngineError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(EngineError, ValueError):
    """An operation received arguments that violate its contract."""


class ConfigError(EngineError, ValueError):
    """A model or training configuration is inconsistent."""


class ParseError(EngineError, ValueError):
    """A file could not be parsed; the message locates the offending input."""


class CheckpointError(EngineError, ValueError):
    """A checkpoint file is malformed or incompatible with the model."""


class NumericalError(EngineError, ArithmeticError):
    """A computation produced non-finite values."""
