"""Exception hierarchy shared across the package."""


class MmigaError(Exception):
    """Base class for all package-specific failures."""


class ConfigError(MmigaError):
    """Invalid or malformed run configuration."""


class AssemblyError(MmigaError):
    """Quadrature-time failure (nonpositive weight, non-finite data)."""


class SolverError(MmigaError):
    """Base class for linear-solver failures."""


class ConvergenceError(SolverError):
    """Iterative solver did not reach the requested tolerance."""


class BreakdownError(SolverError):
    """Iterative solver hit a zero or negative curvature direction."""


class SingularMatrixError(SolverError):
    """Direct solve on a numerically singular matrix."""


class DegenerateMapError(MmigaError):
    """Jacobian of the logical map is numerically singular at a mesh node."""


class MeshWrapError(MmigaError):
    """Mesh update could not produce a valid (positive Jacobian) mesh."""
