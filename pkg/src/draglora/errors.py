class ConfigError(ValueError):
    """Invalid configuration value (bad ranges, mismatched sizes)."""


class CheckpointError(RuntimeError):
    """Checkpoint container is corrupt, truncated, or incompatible."""
