"""Exception hierarchy shared across the solver modules."""


class IphaError(Exception):
    """Base class for every error raised by this package."""


class DimensionError(IphaError, ValueError):
    """An array does not conform to the scenario space it is used with."""


class ParameterError(IphaError, ValueError):
    """A numeric parameter lies outside its admissible range."""


class IntegrityError(IphaError):
    """A caller-supplied projection returned an infeasible point."""


class ConfigurationError(IphaError, ValueError):
    """Solver configuration cannot work for the given instance."""


class BudgetError(IphaError):
    """An iterative solver ran out of iterations.

    The last residual reached is kept on ``residual``.
    """

    def __init__(self, message, residual=None):
        super().__init__(message)
        self.residual = residual


class DegenerateStepError(IphaError):
    """The projection step direction vanished before the stop test fired."""


class ConsistencyError(IphaError):
    """An internal invariant (subspace membership, step bound) was violated."""


class SchemaError(IphaError, ValueError):
    """A serialized document does not match its schema."""
