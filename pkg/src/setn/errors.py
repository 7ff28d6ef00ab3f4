"""Exception types shared across the package."""


class SetnError(Exception):
    """Base class for package-specific failures."""


class ShapeError(SetnError, ValueError):
    """Operands have incompatible shapes."""


class ContractError(SetnError, RuntimeError):
    """An operation was called outside its contract."""


class DataError(SetnError, ValueError):
    """Malformed or inconsistent input data."""


class LabelError(SetnError, ValueError):
    """A class label is outside the valid range."""


class CheckpointError(SetnError, RuntimeError):
    """A checkpoint file is unreadable, corrupt, or incompatible."""


class TrainingError(SetnError, RuntimeError):
    """Training aborted, e.g. on a non-finite loss."""
