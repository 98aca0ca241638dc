"""Learned-dynamics MPPI guidance with online meta-adaptation, in a 3D engagement simulator."""

from .config import EngagementConfig, load_config
from .engagement import ActuatorFault, ControlCommand, EngagementState, TargetManeuver
from .errors import (
    ConfigError,
    CorruptFile,
    EmptyBuffer,
    EmptyDataset,
    MetaGuideError,
    ShapeMismatch,
    SingularGeometry,
    VersionMismatch,
)

__version__ = "0.1.0"

__all__ = [
    "ActuatorFault",
    "ConfigError",
    "ControlCommand",
    "CorruptFile",
    "EmptyBuffer",
    "EmptyDataset",
    "EngagementConfig",
    "EngagementState",
    "MetaGuideError",
    "ShapeMismatch",
    "SingularGeometry",
    "TargetManeuver",
    "VersionMismatch",
    "load_config",
]
