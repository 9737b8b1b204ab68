"""Exception hierarchy shared by every siamface module."""


class SiamFaceError(Exception):
    """Base class for all package errors."""


class DimensionError(SiamFaceError, ValueError):
    """Tensor shapes or channel counts do not line up."""


class CheckpointFormatError(SiamFaceError):
    """A checkpoint file is truncated, corrupt or inconsistent.

    ``field`` names the offending part of the file (magic, header, a
    tensor name, ...).
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class UnsupportedVersionError(CheckpointFormatError):
    pass


class PGMParseError(SiamFaceError, ValueError):
    def __init__(self, message, path=None):
        if path is not None:
            message = f"{path}: {message}"
        super().__init__(message)
        self.path = path


class DatasetError(SiamFaceError):
    pass


class SplitError(DatasetError):
    pass


class TrainingError(SiamFaceError):
    pass


class EmptyStoreError(SiamFaceError, LookupError):
    pass


class StoreLoadError(SiamFaceError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MalformedRequest(SiamFaceError, ValueError):
    """A wire message could not be decoded; ``field`` names the culprit."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class RegisterRejected(SiamFaceError):
    pass


class FrameError(SiamFaceError, ValueError):
    pass
