"""Exception types shared across the package."""


class GlmPo2plsError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatchError(GlmPo2plsError, ValueError):
    """Array shapes or declared dimensions are inconsistent."""


class NumericalDomainError(GlmPo2plsError, ArithmeticError):
    """A quantity left its numerical domain (e.g. a covariance lost positive
    definiteness or an information matrix is not invertible)."""


class EstimationError(GlmPo2plsError, RuntimeError):
    """An estimation routine had to abort (degenerate moments, variance
    collapse, non-finite likelihood)."""


class GridBudgetError(GlmPo2plsError, RuntimeError):
    """A requested quadrature grid exceeds the configured point budget."""


class DataFormatError(GlmPo2plsError, ValueError):
    """Input data violates the expected tabular format or value domain."""
