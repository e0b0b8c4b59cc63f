"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with an operation."""


class ConfigurationError(ValueError):
    """A network configuration violates its invariants."""


class CheckpointError(ValueError):
    """A checkpoint does not match the network it is loaded into."""


class DataError(ValueError):
    """Malformed input data (manifest rows, masks, labels)."""
