class ShapeError(ValueError):
    """Raised when tensor dimensions, channel counts or image sizes disagree."""


class BoxError(ValueError):
    """Raised for invalid boxes, boxes outside the image, or zero-area RoIs."""


class SequenceFormatError(ValueError):
    """Raised when a sequence directory or ground-truth file is malformed."""


class ConfigError(ValueError):
    """Raised when a configuration fails validation.

    The message lists every failing key as a dotted path.
    """
