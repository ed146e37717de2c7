class ValidationError(ValueError):
    """An input violates an operation's preconditions."""


class VolumeReadError(OSError):
    """A volume file is missing or cannot be parsed."""


class ShapeMismatchError(ValueError):
    """Image and label grids (or prediction and target) disagree in shape."""


class ConfigError(ValueError):
    """A run configuration failed schema validation."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
