"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """A run/model/channel configuration is malformed or inconsistent."""


class TrajectoryError(ValueError):
    """A fading trajectory file is malformed or contains unusable records."""


class ProtocolError(RuntimeError):
    """An interactive session reached an internally inconsistent state."""


class CheckpointError(ValueError):
    """A checkpoint file is missing arrays or has mismatched shapes/metadata."""
