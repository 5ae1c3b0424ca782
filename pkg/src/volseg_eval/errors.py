"""Exception types shared across the toolkit."""


class VolsegError(Exception):
    """Base class for all toolkit errors."""


class VolumeFormatError(VolsegError):
    """Unsupported, corrupt, or out-of-contract volume file."""


class GridMismatchError(VolsegError):
    """Two volumes do not share a voxel grid and must not be compared."""

    def __init__(self, message, grid_a=None, grid_b=None):
        super().__init__(message)
        self.grid_a = grid_a
        self.grid_b = grid_b


class UnknownLabelError(VolsegError):
    """A volume contains a label value the declared scheme does not define."""


class EmptySourceError(VolsegError):
    """An operation that needs a non-empty source mask received an empty one."""


class LandmarkError(VolsegError):
    """A landmark mask required for ROI cropping is missing or empty."""
