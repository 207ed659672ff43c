"""Exception types shared across the toolkit."""


class StorageError(RuntimeError):
    """Backing file of an external array is missing or truncated."""


class ConfigError(ValueError):
    """Block/memory configuration cannot support the requested operation."""


class BudgetExceededError(MemoryError):
    """An allocation would push tracked buffer memory past the budget."""


class QueueEmptyError(IndexError):
    """pop/top on an empty priority queue."""


class FormatError(ValueError):
    """Malformed graph input (self-loop, bad node id, bad weight, ...)."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class DimensionError(ValueError):
    """An array's length does not match the structure it must describe."""


class ParameterError(ValueError):
    """Out-of-range algorithm parameter (k, epsilon, workers, ...)."""


class IntegrityError(RuntimeError):
    """On-disk structure violates an invariant (sentinels, offsets, messages)."""


class InfeasiblePartitionError(RuntimeError):
    """No balanced partition could be produced after rebalance attempts."""


class CoarseningStallError(RuntimeError):
    """Clustering stopped shrinking while the level still exceeds the memory target."""
