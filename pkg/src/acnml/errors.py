"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument violates a precondition (shape, range, missing field)."""


class NumericalError(ArithmeticError):
    """A computation produced non-finite or otherwise unusable values."""


class ConvergenceError(RuntimeError):
    """An iterative fit stopped before reaching its tolerance."""

    def __init__(self, message, grad_norm=float("nan"), theta=None):
        super().__init__(f"{message} (final gradient norm {grad_norm:.3e})")
        self.grad_norm = grad_norm
        self.theta = theta


class IndefiniteError(NumericalError):
    """A matrix that must be positive definite is not."""

    def __init__(self, message, min_eigenvalue):
        super().__init__(f"{message} (smallest eigenvalue {min_eigenvalue:.6e})")
        self.min_eigenvalue = min_eigenvalue


class InsufficientTrajectoryError(RuntimeError):
    """Too few SGD iterates were collected to estimate second moments."""


class DataFormatError(ValueError):
    """A delimited text file could not be parsed."""
