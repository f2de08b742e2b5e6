"""Shared exception types."""


class DimensionError(ValueError):
    """Tensor shapes do not line up for the requested operation."""


class ConfigError(ValueError):
    """A structural/configuration precondition is violated."""


class GraphError(RuntimeError):
    """Misuse of the autodiff graph (non-scalar loss, repeated backward, ...)."""
