"""Single-layer spatiotemporal graph transformer for traffic forecasting, on a small numpy autodiff core."""
from .errors import (
    CheckpointFormatError,
    ConfigError,
    ContractError,
    DataError,
    DegenerateDegreeError,
    DimensionError,
    EmptyMaskError,
    EstimationError,
    LoadError,
    NonFiniteError,
    StgError,
    TrainingError,
)

__version__ = "0.1.0"
