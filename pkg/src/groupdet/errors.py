"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A config value or combination of values is invalid."""


class CheckpointError(RuntimeError):
    """A checkpoint file is missing keys, corrupt, or from an incompatible version."""


class AnnotationError(ValueError):
    """An annotation file violates the COCO schema or its internal references."""
