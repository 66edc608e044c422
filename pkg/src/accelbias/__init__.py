"""Bias estimation for stationary triaxial accelerometers at unknown orientation.

Two model-based baselines (trust-region least squares on the gravity norm and
an iterative linearised gravity-norm solver) and OFBENet, a small 1D
convolutional regressor, plus the synthetic data, labelling and statistical
evaluation needed to compare them.
"""

__version__ = "0.1.0"

from .errors import (
    CalibrationError,
    DegenerateVarianceError,
    DivergenceError,
    InsufficientDataError,
    InvalidArgumentError,
    NonFiniteGradientError,
    ParseError,
    RankDeficientError,
    ShapeError,
    SingularResidualError,
    StateError,
)
from .signal_model import (
    STANDARD_GRAVITY,
    BiasVector,
    NoiseModel,
    OrientationAngles,
    SignalSegment,
    gravity_projection,
    max_allowable_tilt,
    rotation_matrix,
    simulate_segment,
    tilt_induced_error,
)

__all__ = [
    "__version__",
    "STANDARD_GRAVITY",
    "BiasVector",
    "CalibrationError",
    "DegenerateVarianceError",
    "DivergenceError",
    "InsufficientDataError",
    "InvalidArgumentError",
    "NoiseModel",
    "NonFiniteGradientError",
    "OrientationAngles",
    "ParseError",
    "RankDeficientError",
    "ShapeError",
    "SignalSegment",
    "SingularResidualError",
    "StateError",
    "gravity_projection",
    "max_allowable_tilt",
    "rotation_matrix",
    "simulate_segment",
    "tilt_induced_error",
]
