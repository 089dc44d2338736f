class SlsAdaptError(Exception):
    """Base class for every error raised by the toolkit."""

    pass


class DimensionMismatchError(SlsAdaptError, ValueError):
    """Raised when array shapes do not agree with the declared dimensions."""

    pass
