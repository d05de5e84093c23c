"""Exception types raised across the package."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation.

    Raised for matrices that are not symmetric, not positive definite, or
    do not have a unit diagonal when a correlation matrix is required.
    """


class ConvergenceError(RuntimeError):
    """An iterative solver stopped before meeting its tolerance."""

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class StructureError(ValueError):
    """A correlation matrix or parameter vector is incompatible with a block layout."""


class SpecError(ValueError):
    """Invalid model specification (partition, degrees of freedom, shapes)."""


class ConditioningError(ArithmeticError):
    """A matrix needed for a closed-form inverse is singular or nearly so."""


class FilterDivergenceError(FloatingPointError):
    """A filter produced a non-finite state.

    Parameters
    ----------
    message : str
        Description.
    step : int
        Index of the first time step with a non-finite value.
    """

    def __init__(self, message: str, step: int = -1):
        super().__init__(message)
        self.step = step
