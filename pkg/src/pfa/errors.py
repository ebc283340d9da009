"""Exception types shared across the package."""


class PFAError(Exception):
    """Base class for all package errors."""


class ShapeError(PFAError, ValueError):
    """Operands have incompatible shapes. Message names both shapes."""


class GraphError(PFAError, RuntimeError):
    """Invalid autograd usage (non-scalar loss, repeated backward, ...)."""


class DegenerateConfigurationError(PFAError, ValueError):
    """Point configuration too degenerate for a similarity fit."""


class CheckpointError(PFAError, IOError):
    """Checkpoint or binary asset file is malformed or inconsistent."""


class PrerequisiteError(PFAError, RuntimeError):
    """A training stage was started without its prerequisite checkpoint."""


class NumericalError(PFAError, ArithmeticError):
    """Non-finite values encountered where finite math is required."""
