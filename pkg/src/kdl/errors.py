"""Exception types shared across the package."""


class KdlError(Exception):
    """Base class for all package errors."""


class ValidationError(KdlError, ValueError):
    """A parameter violates a documented invariant."""


class GridError(ValidationError):
    """Invalid grid geometry."""


class RepresentationError(KdlError, TypeError):
    """Operation needs a different field representation."""


class ShapeError(KdlError, ValueError):
    """Array or axis shape does not fit the operation."""


class SymbolError(KdlError, ValueError):
    """Fourier symbol is not finite on the grid frequencies."""


class SingularityError(KdlError, ZeroDivisionError):
    """Kernel evaluated on its singular set without regularization."""


class GridMismatchError(ValidationError):
    """Fields live on different grids."""


class UnsupportedError(KdlError, NotImplementedError):
    """Parameter combination not supported by the requested method."""


class ResolutionError(KdlError, ValueError):
    """Quadrature reaches beyond what the grid resolves."""


class ExponentError(ValidationError):
    """Exponent tuple violates the scaling relation of an inequality."""


class ParameterError(ValidationError):
    """Construction parameters are inconsistent."""


class SpanError(KdlError, ValueError):
    """Time window outside a trajectory's span."""


class WraparoundError(KdlError, ValueError):
    """Periodic shift would wrap support across the box boundary."""


class DivergenceError(KdlError, RuntimeError):
    """Fixed-point iteration stopped contracting."""

    def __init__(self, message, history=None, subinterval=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []
        self.subinterval = subinterval
