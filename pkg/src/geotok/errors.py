"""Exception hierarchy shared across the package."""


class GeotokError(Exception):
    """Base class for all package errors."""


class MeshFormatError(GeotokError):
    """A mesh file could not be parsed."""

    def __init__(self, path, line_no, message):
        self.path = str(path)
        self.line_no = line_no
        super().__init__(f"{self.path}:{line_no}: {message}")


class MeshValidationError(GeotokError):
    """Mesh data violates a structural invariant."""


class DegenerateGeometryError(GeotokError):
    """Geometry is too degenerate for the requested operation."""


class DomainError(GeotokError, ValueError):
    """An argument lies outside the operation's domain."""


class NumericError(GeotokError, ArithmeticError):
    """An iterative numerical routine failed to converge."""


class ApportionmentError(DomainError):
    """Patches cannot be distributed over the graph components."""


class TrainingError(GeotokError):
    """Training diverged or produced non-finite values."""


class StaleCacheError(GeotokError):
    """A precompute bundle does not match the mesh it is used with."""


class ConfigError(GeotokError, ValueError):
    """A configuration is internally inconsistent."""


class TapeError(GeotokError, RuntimeError):
    """A recorded computation was reused after its gradients were consumed."""
