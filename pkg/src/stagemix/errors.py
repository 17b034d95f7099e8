"""Exception types shared across the package."""


class StagemixError(Exception):
    """Base class; `category` is the machine-readable name emitted by the CLI."""

    @property
    def category(self) -> str:
        return type(self).__name__


class ConfigError(StagemixError):
    pass


class MalformedFilename(StagemixError):
    pass


class MissingDirectory(StagemixError):
    pass


class EmptySplit(StagemixError):
    pass


class InsufficientIdentities(StagemixError):
    pass


class ShapeMismatch(StagemixError):
    pass


class StageCountMismatch(StagemixError):
    pass


class NoGradientPath(StagemixError):
    pass


class InvalidClass(StagemixError):
    pass


class GridMismatch(StagemixError):
    pass


class KOutOfRange(StagemixError):
    pass


class NoNegativeAvailable(StagemixError):
    pass


class InvalidLabel(StagemixError):
    pass


class DegenerateBatch(StagemixError):
    pass


class NonFiniteLoss(StagemixError):
    pass


class NoValidGallery(StagemixError):
    pass
