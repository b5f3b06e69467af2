"""Exception types shared across the toolkit."""


class GamakitError(Exception):
    """Base class for every error raised by gamakit."""


class ConfigError(GamakitError, ValueError):
    """Invalid configuration, shape mismatch or out-of-range argument."""


class NumericError(GamakitError, ArithmeticError):
    """A non-finite value appeared during a computation.

    ``layer`` is set when the failure is localised to a network layer,
    ``iteration`` when it happened inside an iterative attack, and ``epoch``
    when a training run diverged.
    """

    def __init__(self, message, layer=None, iteration=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.iteration = iteration
        self.epoch = epoch


class ParseError(GamakitError, ValueError):
    """A file could not be parsed; ``field`` names the offending part."""

    def __init__(self, message, field=None):
        super().__init__(message if field is None else f"{field}: {message}")
        self.field = field


class IncompatibleCheckpoint(GamakitError):
    """A checkpoint does not match the architecture it is loaded into."""
