"""Exception types shared across the package."""


class TrajDiffError(Exception):
    """Base class for all package errors."""


class ConfigError(TrajDiffError):
    """Invalid configuration, flags, or mismatched problem kinds (CLI exit 2)."""


class PlacementError(TrajDiffError):
    """Obstacle rejection sampling exhausted its attempt budget."""


class NumericInputError(TrajDiffError):
    """Non-finite values fed into a numeric routine."""


class ShapeError(TrajDiffError):
    """Array arguments with incompatible dimensions."""


class CheckpointError(TrajDiffError):
    """Unreadable, truncated, or incompatible artifact file."""


class TrainingDiverged(TrajDiffError):
    """Training loss became non-finite; carries diagnostics in the message."""


class ClampWarning(UserWarning):
    """Physical input outside its declared box was clamped."""
