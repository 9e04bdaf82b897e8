"""Exception hierarchy shared across the pipeline."""


class SelfsegError(Exception):
    """Base class for all pipeline errors."""


class ValidationError(SelfsegError):
    """An input violates a documented invariant (bad shape, NaN, out of range)."""


class FormatError(SelfsegError):
    """A file on disk does not conform to its declared binary format."""


class DegenerateInputError(SelfsegError):
    """An input is structurally valid but degenerate for the requested operation
    (zero-norm embedding, single-class mask, too few nodes)."""


class ConvergenceError(SelfsegError):
    """An iterative solver exhausted its iteration budget."""

    def __init__(self, message, best_residual=None, iterations=None):
        super().__init__(message)
        self.best_residual = best_residual
        self.iterations = iterations
