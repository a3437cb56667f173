"""Exception types raised across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class ContractViolationError(RuntimeError):
    """Mismatched forward/backward state or inconsistent internal caches."""


class ConfigError(ValueError):
    """Malformed or inconsistent training configuration."""


class ManifestError(ValueError):
    """Scene manifest is malformed or references inconsistent data."""


class MissingImageError(FileNotFoundError):
    """A ground-truth image referenced by the manifest does not exist."""


class ImageDimensionError(ValueError):
    """A ground-truth image does not match its camera's dimensions."""


class CheckpointVersionError(RuntimeError):
    """Checkpoint was written by an incompatible (newer major) format version."""


class CheckpointCorruptError(RuntimeError):
    """Checkpoint file is truncated or fails structural validation."""


class TrainingDiverged(RuntimeError):
    """Training aborted on a non-finite loss; diagnostic state was dumped."""
