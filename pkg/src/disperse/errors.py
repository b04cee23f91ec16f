"""Exception hierarchy shared by every module."""


class DisperseError(Exception):
    """Base class for all errors raised by :mod:`disperse`."""


class ConfigurationError(DisperseError, ValueError):
    """Malformed scene description or scatterer parameters."""


class UnsupportedOrderError(DisperseError, ValueError):
    pass


class PreconditionError(DisperseError, ValueError):
    """An operation was called outside its documented domain."""


class DegenerateGradientError(PreconditionError):
    pass


class ConvexityError(DisperseError):
    """Strict convexity is violated (smallest Hessian eigenvalue <= 0)."""

    def __init__(self, message, min_eigenvalue=None):
        super().__init__(message)
        self.min_eigenvalue = min_eigenvalue


class InvalidStartError(DisperseError):
    """A ray starts strictly inside a scatterer body."""


class MultipleCollisionError(DisperseError):
    """Two distinct instances are hit within ``tau0 / 2`` of each other."""


class NoHitError(DisperseError):
    """No collision within the horizon bound."""


class NoIntersectionError(DisperseError):
    """A line misses its target scatterer."""


class NoMinimumError(DisperseError):
    pass


class NoConvergenceError(DisperseError):
    def __init__(self, message, last_iterate=None):
        super().__init__(message)
        self.last_iterate = last_iterate


class StencilCrossingError(DisperseError):
    """A finite-difference stencil straddles a singularity of the map."""


class OutOfChartError(DisperseError):
    pass


class ContinuationUnavailableError(DisperseError):
    pass


class InsufficientSamplesError(DisperseError):
    pass


class ResolutionError(DisperseError):
    """A singularity point cloud is too sparse for the requested delta."""


class InfeasibleTypeError(DisperseError):
    """The trajectory no longer realizes the prescribed combinatorial type."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
