"""Exception types shared across the package.

The CLI maps these onto process exit codes, so solver-side code should
raise the most specific type that applies rather than bare ValueError.
"""


class FinromError(Exception):
    """Base class for package errors."""


class ConfigError(FinromError):
    """Invalid or inconsistent configuration (CLI exit code 2)."""


class GeometryError(FinromError):
    """Degenerate or inverted geometry (nonpositive map determinant)."""


class SolverError(FinromError):
    """A linear or nonlinear solve failed (CLI exit code 3)."""


class ConvergenceError(SolverError):
    """An iterative solve ran out of iterations or tolerance levels.

    Carries the best iterate (or report) and any residual-norm history so
    callers can resample or report.
    """

    def __init__(self, message, best=None, history=None):
        super().__init__(message)
        self.best = best
        self.history = history if history is not None else []


class ArtifactError(FinromError):
    """A library artifact is corrupt or unreadable."""


class ArtifactVersionError(ArtifactError):
    """Artifact format version mismatch (CLI exit code 4)."""
