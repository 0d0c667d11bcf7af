"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Mismatched dimensions, resolutions, grids or unknown catalog ids."""


class BlowupError(RuntimeError):
    """Raised when the integrator produces non-finite or runaway states.

    Carries the simulation time at which the check failed.
    """

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time
