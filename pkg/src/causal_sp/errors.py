"""Exception hierarchy shared by every module in the package."""


class CausalSPError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CausalSPError, ValueError):
    """Tensor extents are invalid or incompatible."""


class ConfigurationError(CausalSPError, ValueError):
    """A configuration value violates a precondition."""


class PartitionError(ConfigurationError):
    """An extent is not divisible by the world size."""


class PositionRangeError(CausalSPError, IndexError):
    """A position falls outside the precomputed frequency table."""


class AlignmentError(ShapeError):
    """A sequence length is not a whole number of frames."""


class EmptyCacheError(CausalSPError, LookupError):
    """Read from a KV cache that holds no entries."""


class CollectiveError(CausalSPError, RuntimeError):
    """Ranks entered a collective inconsistently."""


class DeadlockError(CollectiveError):
    """A collective can never complete because a rank will not join it."""
