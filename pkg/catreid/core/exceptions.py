"""Toolkit exceptions.

Every exception carries the exit code the CLI reports for it: 1 for problems
with the user's inputs, 2 for problems with the environment.
"""


class CatReidError(Exception):
    """Base class for all toolkit errors."""

    exit_code: int = 1

    def __init__(self, detail: str = "catreid error"):
        super().__init__(detail)
        self.detail = detail


class UserInputError(CatReidError):
    """Bad input data, configuration or command order."""

    exit_code = 1


class EnvironmentFailure(CatReidError):
    """A dependency outside the toolkit failed."""

    exit_code = 2


class ConfigValidationError(UserInputError):
    """Suite or run configuration is invalid."""


class ManifestError(UserInputError):
    """Manifest content is inconsistent or a dataset root is unusable."""


class ManifestParseError(ManifestError):
    """Manifest file could not be parsed."""

    def __init__(self, path: str, line: int, detail: str):
        super().__init__(f"{path}:{line}: {detail}")
        self.path = path
        self.line = line


class SchemaVersionError(ManifestError):
    """Persisted artifact uses an unsupported schema version."""


class StageOrderError(UserInputError):
    """A pipeline stage was invoked before its inputs exist."""


class DatasetEmptyError(ManifestError):
    """No usable classes remain."""


class ClassTooSmallError(ManifestError):
    """A class has too few images for the requested operation."""

    def __init__(self, class_id: str, have: int, need: int):
        super().__init__(f"class '{class_id}' has {have} images, needs at least {need}")
        self.class_id = class_id


class ImageReadError(UserInputError):
    """An image file could not be decoded."""

    def __init__(self, path: str, reason: str = "unreadable image"):
        super().__init__(f"{reason}: {path}")
        self.path = path


class InvalidEmbeddingError(UserInputError, ValueError):
    """Embedding vectors have mismatched shapes or non-finite values."""


class EmptyGalleryError(UserInputError):
    """Gallery holds no rows."""


class GalleryParseError(UserInputError):
    """Gallery file is truncated or its header is unreadable."""

    def __init__(self, path: str, detail: str):
        super().__init__(f"{path}: {detail}")
        self.path = path


class NoTripletsError(UserInputError):
    """A whole epoch produced no valid triplet."""


class NonFiniteLossError(UserInputError):
    """Training produced a NaN or infinite loss."""


class FreezeViolationError(UserInputError):
    """A frozen parameter changed during transfer training."""


class ReportError(UserInputError):
    """Report inputs are empty, duplicated or incompatible."""


class DetectorUnavailableError(EnvironmentFailure):
    """The subject detector could not be reached."""


class WeightsDownloadError(EnvironmentFailure):
    """Pretrained weights failed to download."""


class WeightsCacheMissError(EnvironmentFailure):
    """Offline mode is on and the weights are not cached."""
