"""Exception types shared across the package."""


class DatmoError(Exception):
    """Base class for package errors."""


class ConfigError(DatmoError, ValueError):
    """Invalid parameters or configuration."""


class DataError(DatmoError):
    """Malformed or inconsistent input data."""


class AlignmentError(DataError):
    """Track and ground-truth streams do not share a frame clock."""

    def __init__(self, message: str, frames: list[int]):
        super().__init__(message)
        self.frames = frames
