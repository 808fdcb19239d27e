"""Exception hierarchy shared across the package."""


class SpatialIVError(Exception):
    """Base class for all package errors."""


class ConfigError(SpatialIVError, ValueError):
    """Invalid configuration or precondition violation."""


class IsolatedSiteError(SpatialIVError):
    """A site has no neighbour inside the kernel truncation distance."""

    def __init__(self, index, truncation):
        self.index = index
        self.truncation = truncation
        super().__init__(f"site {index} has no neighbour within distance {truncation:g}")


class NumericalDegeneracyError(SpatialIVError):
    """Covariance factorization failed even after maximum jitter."""


class SingularDesignError(SpatialIVError):
    """Design matrix is rank deficient."""


class WeakInstrumentError(SpatialIVError):
    """Instrument has (numerically) zero variance."""


class FitError(SpatialIVError):
    """Likelihood optimization did not converge.

    ``best`` holds the best iterate found, as a dict of parameter values.
    """

    def __init__(self, message, best=None):
        self.best = best
        super().__init__(message)


class UnattainableTargetError(SpatialIVError):
    """Rejection sampling exhausted its attempt budget."""

    def __init__(self, message, achieved=None, attempts=0):
        self.achieved = achieved or {}
        self.attempts = attempts
        super().__init__(message)


class DegenerateVarianceError(SpatialIVError):
    """Total variance is zero."""


class PanelError(SpatialIVError, ValueError):
    """Malformed panel input; message names the offending line or record."""
