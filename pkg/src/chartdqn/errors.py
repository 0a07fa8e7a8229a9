"""Exception types shared across the package."""


class ChartDQNError(Exception):
    """Base class for errors caused by bad input or configuration."""


class FormatError(ChartDQNError, ValueError):
    """A file or record does not follow the expected layout."""


class EmptySeriesError(FormatError):
    """A price file contained no usable rows."""


class UnsupportedVersionError(FormatError):
    """A checkpoint was written with a format version we cannot read."""


class DomainError(ChartDQNError, ValueError):
    """A numeric argument is outside the domain of the function."""


class ShapeError(ChartDQNError, ValueError):
    """An array does not have the shape the network expects."""


class DatasetError(ChartDQNError, ValueError):
    """A dataset cannot be used for the requested operation."""


class DegenerateDistributionError(ChartDQNError, ValueError):
    """A null distribution has zero spread, so a Z-score is undefined."""


class StaleCacheError(RuntimeError):
    """Backward was called with activations from an older parameter set."""


class TrainingDivergenceError(RuntimeError):
    """Non-finite values appeared in the loss or gradients."""

    def __init__(self, message, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
