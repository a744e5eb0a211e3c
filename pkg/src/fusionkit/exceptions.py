"""Exception types raised across fusionkit."""


class FusionKitError(Exception):
    """Base class for all library errors."""


class ParameterError(FusionKitError, ValueError):
    """An argument violates a documented precondition."""


class FormatError(FusionKitError, ValueError):
    """A file on disk does not match the expected format."""


class SceneError(FusionKitError, ValueError):
    """A synthetic scene description is geometrically degenerate."""


class UnanchoredSystemError(FusionKitError):
    """Graph correction was requested without any LiDAR anchor."""


class ConvergenceError(FusionKitError):
    """An iterative solver stopped before reaching its tolerance."""

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DivergenceError(FusionKitError):
    """Optimization produced a non-finite loss.

    ``state`` holds the last finite optimizer state.
    """

    def __init__(self, message, state=None):
        super().__init__(message)
        self.state = state
