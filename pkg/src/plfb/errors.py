"""Exception types shared across the package."""


class PlfbError(Exception):
    """Base class for all package errors."""


class ConfigError(PlfbError):
    """Invalid configuration value or geometric precondition violation."""


class ShapeError(PlfbError):
    """Field/grid shape mismatch."""


class TopologyError(PlfbError):
    """Active region disconnected from the inner Dirichlet boundary."""


class EmptyBoundaryError(PlfbError):
    """Level set has no zero contour."""


class DomainTooSmallError(PlfbError):
    """Free boundary approached the computational box."""


class GeometryError(PlfbError):
    """A point that must lie on the free boundary does not."""


class QuadratureError(PlfbError):
    """Numerical quadrature failed to converge."""


class ConvergenceError(PlfbError):
    """Iteration failed to converge.

    Carries the residual history (inner solver) or the last outer state
    (optimizer) so callers can inspect what happened.
    """

    def __init__(self, message, history=None, state=None):
        super().__init__(message)
        self.history = history
        self.state = state
