"""Exception types shared across the package.

Every error raised on a documented contract boundary derives from
:class:`TzkError`, so callers can catch the whole family at once.
"""


class TzkError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(TzkError):
    """Shapes or extents do not satisfy an operation's requirements."""


class DomainError(TzkError):
    """Input lies outside the mathematical domain of an operation."""


class NumericError(TzkError):
    """A non-finite value (NaN/Inf) appeared where finiteness is required."""


class ContractError(TzkError):
    """A documented precondition was violated by the caller."""


class StateError(TzkError):
    """Object is not in the state the operation requires."""


class GraphError(TzkError):
    """Backward was requested on a value with no recorded computation."""


class FormatError(TzkError):
    """A serialized artifact is malformed or version-incompatible."""


class ConfigError(TzkError):
    """Run configuration is invalid."""


class LabelingError(TzkError):
    """An example's knowledge labels are inconsistent or incomplete."""


class DegenerateInputError(TzkError):
    """Input data is degenerate (e.g. zero variance where spread is needed)."""


class RangeError(TzkError):
    """A value exceeds the representable range of a codec."""


class TrainingAbort(TzkError):
    """Training stopped because the loss became non-finite."""
