"""Exception hierarchy shared by all modules."""


class PodecmError(Exception):
    """Base class for all package errors."""


class MeshError(PodecmError):
    """Malformed mesh file or violated mesh invariant."""


class MaterialError(PodecmError):
    """Invalid material parameters or inadmissible kinematics."""


class MorphError(PodecmError):
    """Failure of the geometric transformation (e.g. element inversion)."""


class ConvergenceError(PodecmError):
    """Newton iteration did not converge.

    Attributes
    ----------
    step : int or None
        Load step index at which the failure occurred.
    history : list of float
        Residual norms of the failed iteration.
    """

    def __init__(self, message, step=None, history=()):
        super().__init__(message)
        self.step = step
        self.history = list(history)


class BasisError(PodecmError):
    """Reduced basis request that cannot be satisfied."""


class EcmError(PodecmError):
    """Empirical cubature could not reach the requested tolerance."""


class ContainerError(PodecmError):
    """Corrupt, truncated or incompatible array container."""


class ConfigError(PodecmError):
    """Invalid run configuration."""
