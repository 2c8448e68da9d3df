"""Error types shared across modules (shape errors live in `tensor`)."""


class ValidationError(ValueError):
    """A data record, box, or configuration violates its contract."""


class CheckpointError(RuntimeError):
    """A checkpoint is missing, corrupt, or incompatible with the run."""


class TrainingError(RuntimeError):
    """Training hit a non-recoverable numeric condition (e.g. NaN loss)."""
