"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value, unsupported option, or wrong mode."""


class DataError(ValueError):
    """Dataset, batch, or label contents violate an operation's requirements."""


class ShapeError(ValueError):
    """Array shape does not match the expected geometry."""


class FormatError(ValueError):
    """On-disk artifact is malformed, truncated, or of the wrong kind."""


class MetadataError(FormatError):
    """Required sidecar metadata is missing or inconsistent."""


class IntegrityError(RuntimeError):
    """A frozen-model guarantee was violated."""
