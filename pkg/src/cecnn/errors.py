"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Raised when tensor or layer dimensions do not conform."""


class DomainError(ValueError):
    """Raised when an argument lies outside a function's domain."""


class DegenerateDataError(ValueError):
    """Raised when data carry no variation to estimate from."""


class ParameterError(ValueError):
    """Raised for invalid model or copula parameters."""


class DivergenceError(RuntimeError):
    """Raised when training produces a non-finite loss or gradient."""
