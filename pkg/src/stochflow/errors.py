"""Exception hierarchy shared by every module."""


class StochFlowError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(StochFlowError, ValueError):
    """A time or point lies outside the domain an object is defined on."""


class ConstructionError(StochFlowError, ValueError):
    """Invalid parameters when building a basis, template or partition."""


class ConfigurationError(StochFlowError, ValueError):
    """Inconsistent grids or run parameters."""

    def __init__(self, message, key=None):
        super().__init__(message if key is None else f"{key}: {message}")
        self.key = key


class BlowUpError(StochFlowError, FloatingPointError):
    """A trajectory produced a non-finite value."""

    def __init__(self, step, message=None):
        super().__init__(message or f"non-finite position at step {step}")
        self.step = step


class CapabilityError(StochFlowError, TypeError):
    """A field does not provide something the caller asked for (e.g. gradients)."""


class UnderflowError(StochFlowError, FloatingPointError):
    """Monte Carlo weights degenerated; the estimate would be meaningless."""


class PartitionError(StochFlowError, ValueError):
    """A point is not covered by any cell of a partition."""


class IntegrityError(StochFlowError, RuntimeError):
    """A transported trajectory left the closed image domain."""


class SizeError(StochFlowError, ValueError):
    """A requested enumeration is too large to evaluate."""


class MissingCacheError(StochFlowError, RuntimeError):
    """A cached quantity must be computed before it can be used."""
