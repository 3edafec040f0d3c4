"""Exception types shared across modules."""


class ConfigError(ValueError):
    """Invalid parameters or configuration."""


class DimensionError(ValueError):
    """Mismatched dimension or resolution between objects."""


class ValidationError(AssertionError):
    """A checked property of a constructed object failed.

    ``cube`` names the offending cube id when there is one.
    """

    def __init__(self, message, cube=None, measured=None, bound=None):
        super().__init__(message)
        self.cube = cube
        self.measured = measured
        self.bound = bound


class ConsistencyError(RuntimeError):
    """An internal identity that must hold exactly was violated."""
