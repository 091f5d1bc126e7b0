"""
Exception hierarchy shared by the solvers and the command-line front end.
"""


class BrittleHomogError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(BrittleHomogError):
    """Malformed or invalid run configuration."""


class GeometryError(BrittleHomogError, ValueError):
    """Invalid microstructure, lattice or cut-graph request."""


class SolverError(BrittleHomogError):
    """Linear solver breakdown or an ill-posed discrete problem."""


class LatticeMismatchError(BrittleHomogError, ValueError):
    """Two fields or a field and a corrector live on incompatible grids."""


class CacheError(BrittleHomogError):
    """Unrecoverable problem with the result cache."""
