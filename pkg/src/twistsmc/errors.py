"""Exception types shared across the library."""


class TwistSmcError(Exception):
    """Base class for library-specific errors."""


class InvalidTrajectoryError(TwistSmcError):
    """A trajectory has the wrong length or an out-of-range state index."""


class CapacityError(TwistSmcError):
    """An exact enumeration would exceed the configured path cap."""


class DegenerateWeightsError(TwistSmcError):
    """A weight vector carries no mass (all zero), so it cannot be normalized."""


class DivergenceError(TwistSmcError):
    """A numerical procedure produced a non-finite value.

    ``step`` identifies the failing iteration when known.
    """

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"{message} (step {step})")
        self.step = step


class ConfigError(TwistSmcError):
    """An experiment configuration is malformed or inconsistent."""
