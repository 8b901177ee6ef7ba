"""Exception hierarchy shared across the package."""


class CosFairNetError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CosFairNetError, ValueError):
    pass


class DegenerateVectorError(CosFairNetError, ValueError):
    """A vector with (near-)zero norm was passed where a direction is needed."""


class ConfigError(CosFairNetError, ValueError):
    pass


class FormatError(CosFairNetError, ValueError):
    """A serialized file has bad magic, bad version, or is truncated."""


class InsufficientSamplesError(CosFairNetError, ValueError):
    pass


class DivergenceError(CosFairNetError, ArithmeticError):
    """Training produced a non-finite loss."""


class TrainingError(CosFairNetError, RuntimeError):
    """A training step failed; the message carries epoch/step/layer context."""
