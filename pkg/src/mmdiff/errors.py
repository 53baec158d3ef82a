"""Exception types shared across the package."""


class ShapeError(ValueError):
    """An array argument has the wrong shape or resolution."""


class InputError(ValueError):
    """A condition value is outside its documented domain."""


class StateError(RuntimeError):
    """An operation was called on a model in the wrong state."""


class CorruptDatasetError(RuntimeError):
    """A dataset directory is missing files or fails schema validation."""


class CheckpointError(RuntimeError):
    """A checkpoint file is unreadable or carries an unsupported version."""


class TrainingDivergedError(RuntimeError):
    """The training loss became non-finite."""
