"""Exception hierarchy shared by every module."""


class ConcentraError(Exception):
    """Base class for all library errors."""


class DomainError(ConcentraError, ValueError):
    """A field or parameter violates a structural assumption (V > 0, J SPD, p range)."""


class EllipticityError(DomainError):
    """J failed the Cholesky factorization or its ellipticity bound."""


class GridSizeError(ConcentraError, ValueError):
    """Grid parameters are invalid or the grid would exceed the memory cap."""


class ConfigError(ConcentraError, ValueError):
    """Bad or incomplete experiment configuration; ``key`` names the offending entry."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class PreconditionError(ConcentraError, ValueError):
    """An operation was called outside of its admissible inputs."""


class SolverError(ConcentraError, RuntimeError):
    """A numerical procedure could not produce a result."""


class NonConvergenceError(SolverError):
    """An iteration stopped before meeting its tolerance.

    ``last`` carries the final iterate (or report) for inspection.
    """

    def __init__(self, message, last=None):
        super().__init__(message)
        self.last = last


class ContractionError(SolverError):
    """The Lyapunov-Schmidt correction iteration failed to contract."""

    def __init__(self, message, eps=None, xi=None):
        super().__init__(message)
        self.eps = eps
        self.xi = xi


class DegenerateBasisError(SolverError):
    """The tangent basis Gram matrix is numerically singular."""
