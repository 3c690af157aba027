"""Exception hierarchy shared by every module of the package."""


class FloodTransformerError(Exception):
    """Base class for all errors raised by this package."""


class ShapeMismatch(FloodTransformerError, ValueError):
    pass


class InvalidParam(FloodTransformerError, ValueError):
    pass


class NotScalar(FloodTransformerError, ValueError):
    pass


class EmptyMask(FloodTransformerError, ValueError):
    pass


class EmptyInput(FloodTransformerError, ValueError):
    pass


class EmptySplit(FloodTransformerError, ValueError):
    pass


class DuplicateId(FloodTransformerError, ValueError):
    pass


class DecodeError(FloodTransformerError):
    """A file exists but its content could not be decoded."""


class DimensionMismatch(FloodTransformerError, ValueError):
    """Image and mask files disagree in size."""


class CheckpointError(FloodTransformerError):
    """Checkpoint is malformed or incompatible with the model config."""
