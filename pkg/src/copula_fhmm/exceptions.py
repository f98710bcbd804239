"""Exception types raised across the package."""


class DomainError(ValueError):
    """An argument lies outside the domain of a function."""


class NonErgodicError(DomainError):
    """A transition matrix has no unique stationary distribution."""


class BoundaryError(IndexError):
    """A time index does not admit a full data window."""


class ModelSizeError(ValueError):
    """The requested computation is refused for this many chains."""


class ConsistencyError(RuntimeError):
    """An internal invariant was violated (indicates a bug, not bad input)."""


class NumericalError(FloatingPointError):
    """A non-finite value appeared during optimisation.

    Parameters
    ----------
    message : str
        Description of the failure.
    iteration : int, optional
        Optimiser iteration at which the failure occurred.
    """

    def __init__(self, message, iteration=None):
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)
        self.iteration = iteration


class ParseError(ValueError):
    """Malformed input file or configuration."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line
