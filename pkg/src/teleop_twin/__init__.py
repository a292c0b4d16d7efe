"""Delay-injected teleoperation simulator with predictive horizon selection.

Operator pose streams pass through ARMA forecasting, lossy delayed
channels, an edge-hosted virtual twin, and an emulated robotic plant; a
meta-trained agent picks the two prediction horizons online to minimize
weighted trajectory error.
"""

__version__ = "0.1.0"

from .core import (
    NormalizationBounds,
    Pose,
    VirtualClock,
    WorkspaceMap,
    map_workspace,
    minmax_normalize,
    normalize_quaternion,
)

__all__ = [
    "Pose",
    "WorkspaceMap",
    "VirtualClock",
    "NormalizationBounds",
    "normalize_quaternion",
    "map_workspace",
    "minmax_normalize",
    "__version__",
]
