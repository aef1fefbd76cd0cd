class UltraBMError(Exception):
    pass


class ShapeError(UltraBMError, ValueError):
    pass


class ImageFormatError(UltraBMError, ValueError):
    pass


class ManifestError(UltraBMError, ValueError):
    """Manifest could not be parsed or failed validation."""


class ConfigError(UltraBMError, ValueError):
    pass


class TrainingError(UltraBMError, RuntimeError):
    """Raised when a training step produces a non-finite loss.

    ``components`` holds the per-term loss values of the offending step.
    """

    def __init__(self, message, components=None):
        super().__init__(message)
        self.components = dict(components or {})
