"""Exception types shared across the package."""


class MetaGuideError(Exception):
    """Base class for all package errors."""


class SingularGeometry(MetaGuideError):
    """Engagement kinematics hit a coordinate singularity (cos -> 0 or R -> 0)."""


class ShapeMismatch(MetaGuideError, ValueError):
    pass


class EmptyDataset(MetaGuideError, ValueError):
    pass


class EmptyBuffer(MetaGuideError, ValueError):
    pass


class CorruptFile(MetaGuideError):
    """A persisted artifact is truncated or fails its checksum."""


class VersionMismatch(MetaGuideError):
    """A persisted artifact has an unknown magic header or format version."""


class ConfigError(MetaGuideError, ValueError):
    pass
