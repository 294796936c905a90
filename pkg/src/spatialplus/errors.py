"""Exception hierarchy shared by the library and the CLI exit-code mapping."""


class SpatialPlusError(Exception):
    """Base class for all package errors."""


class ParameterError(SpatialPlusError, ValueError):
    """An argument is outside its admissible range or has the wrong shape."""


class DataError(SpatialPlusError, ValueError):
    """Input data violate a schema or content requirement."""


class ConstructionError(DataError):
    """Locations cannot form a valid spline design (e.g. duplicated points)."""


class RankError(ParameterError):
    """Fewer usable eigen-directions than the requested basis size."""

    def __init__(self, message, requested=None, available=None):
        super().__init__(message)
        self.requested = requested
        self.available = available


class CapacityError(ParameterError):
    """More samples requested than the lattice can provide."""


class NumericError(SpatialPlusError, ArithmeticError):
    """A numerical routine failed (non-finite value, factorization failure)."""

    def __init__(self, message, term=None):
        super().__init__(message)
        self.term = term


class SingularityError(NumericError):
    """A linear system required by a fit is singular."""


class ConvergenceError(SpatialPlusError):
    """MCMC diagnostics indicate an unreliable run."""

    def __init__(self, message, draws=None):
        super().__init__(message)
        self.draws = draws


class DivergenceError(ConvergenceError):
    """Too many divergent transitions after warmup."""


class InitializationError(ConvergenceError):
    """No finite starting point found."""


class StudyError(SpatialPlusError):
    """Too many replicates failed for a study to be summarized."""
