"""Exception types shared across the package."""


class DatasetError(ValueError):
    """Manifest validation or image loading failed."""


class CheckpointMismatchError(ValueError):
    """A checkpoint's stored configuration does not match the expected one."""


class TrainingDivergedError(RuntimeError):
    """A loss became NaN; the message names the first offending term."""
