"""Exception taxonomy shared across the package."""


class WarpdetectError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(WarpdetectError, ValueError):
    """Tensor shapes are inconsistent with the operation's contract."""


class ConfigurationError(WarpdetectError, ValueError):
    """Operation parameters are structurally invalid (bad stride, size, key...)."""


class DomainError(WarpdetectError, ValueError):
    """A numeric argument lies outside the operation's domain."""


class TpsFitError(WarpdetectError, RuntimeError):
    """The thin-plate-spline linear system is singular or near-singular."""
