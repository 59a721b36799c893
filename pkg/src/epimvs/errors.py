"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid configuration value (hypothesis counts, groups, epsilon, ...)."""


class UsageError(ValueError):
    """An operation was called with inconsistent arguments."""


class FormatError(ValueError):
    """Malformed or truncated file.

    ``offset`` is the byte offset where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte {offset})"
        super().__init__(message)
        self.offset = offset


class WeightShapeError(ValueError):
    """A weight bundle layer does not match the expected architecture."""

    def __init__(self, layer, message):
        super().__init__(f"layer {layer!r}: {message}")
        self.layer = layer


class SceneError(ValueError):
    """Invalid synthetic scene description."""
