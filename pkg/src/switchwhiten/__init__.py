"""Switchable Whitening: mixed whitening/standardization statistics for CNN layers."""
from .errors import (
    ConfigError,
    DegenerateSpectrum,
    FileError,
    FormatError,
    InvalidInput,
    NumericalFailure,
    OracleFailure,
    ShapeError,
    StateError,
    TrainingDiverged,
)
from .stats import MethodTag, MomentPair
from .sw_layer import (
    PRESETS,
    ForwardCache,
    SwConfig,
    SwitchWhitening,
    SwState,
    backward,
    forward_eval,
    forward_train,
    importance_weights,
    init_state,
)
from .whitening import WhiteningPath

__version__ = "0.1.0"
