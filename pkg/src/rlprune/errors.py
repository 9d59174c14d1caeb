"""Exception types shared across the package."""


class RLPruneError(Exception):
    pass


class ShapeError(RLPruneError, ValueError):
    """Raised when tensor or layer shapes do not line up.

    ``layer`` holds the index of the offending layer when known.
    """

    def __init__(self, message, layer=None):
        super().__init__(message)
        self.layer = layer


class NumericError(RLPruneError, FloatingPointError):
    """A loss or activation became NaN/Inf."""

    def __init__(self, message, layer=None, batch=None):
        super().__init__(message)
        self.layer = layer
        self.batch = batch


class FormatError(RLPruneError, ValueError):
    """Bad magic, version or truncated binary file."""


class InfeasibleBudget(RLPruneError, ValueError):
    """The requested reduction cannot be met even at maximal aggression."""


class ConfigError(RLPruneError, ValueError):
    pass
