"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes violate an operation's contract."""


class ConfigError(ValueError):
    """Invalid configuration or command-line usage."""


class DataError(RuntimeError):
    """Dataset or image input cannot be read or is unusable."""


class BitstreamError(RuntimeError):
    """Bitstream is malformed, truncated, or from an incompatible model."""


class ModelIOError(RuntimeError):
    """Model container is corrupt or has an unsupported version."""
