"""Dense non-rigid structure from motion with a dynamic shape prior."""

from .errors import (
    CorruptStream,
    DegenerateGeometry,
    DegenerateMotion,
    IdWidthOverflow,
    InvalidInput,
    NrsfmError,
    NumericalFailure,
)
from .geomcore import CameraPose, MeasurementMatrix, RobustNormConfig, ShapeSequence

__version__ = "0.1.0"

__all__ = [
    "CameraPose", "CorruptStream", "DegenerateGeometry", "DegenerateMotion", "IdWidthOverflow",
    "InvalidInput", "MeasurementMatrix", "NrsfmError", "NumericalFailure", "RobustNormConfig",
    "ShapeSequence",
]
