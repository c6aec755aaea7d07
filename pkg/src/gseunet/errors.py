"""Exception hierarchy.

Every error raised on purpose by the library derives from :class:`GseUnetError`.
The CLI maps the four families below onto its exit codes.
"""


class GseUnetError(Exception):
    """Base class for all library errors."""


class UsageError(GseUnetError, ValueError):
    """Caller misuse: bad arguments, wrong call order, empty inputs."""


class ConfigError(UsageError):
    """Inconsistent hyperparameters (group divisibility, kernel sizes, ...)."""


class ShapeError(UsageError):
    """Tensor shapes do not satisfy an operation's contract."""

    def __init__(self, op, message, dim=None):
        self.op = op
        self.dim = dim
        where = f" (dimension {dim})" if dim is not None else ""
        super().__init__(f"{op}: {message}{where}")


class DataError(GseUnetError):
    """Problems with on-disk data: images, masks, checkpoints."""


class ImageNotFoundError(DataError, FileNotFoundError):
    pass


class ImageDecodeError(DataError):
    pass


class UnsupportedDepthError(DataError):
    def __init__(self, path, depth):
        self.depth = depth
        super().__init__(f"{path}: unsupported bit depth {depth}, expected 8-bit")


class ImageFormatError(DataError):
    """Wrong container format or channel count."""


class EmptyDatasetError(DataError):
    pass


class CheckpointError(DataError):
    pass


class BadMagicError(CheckpointError):
    pass


class VersionMismatchError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class CheckpointMismatchError(CheckpointError):
    """Stored tensors disagree with the stored model configuration."""


class NumericalError(GseUnetError, ArithmeticError):
    """A NaN/Inf showed up in a loss or gradient."""
