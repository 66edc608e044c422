"""OFBENet: a small 1D CNN that regresses accelerometer bias from a stationary window."""

from .kernels import BACKEND, available_backends
from .layers import (
    avg_pool,
    batch_norm,
    conv1d,
    dense,
    dropout,
    global_avg_pool,
    leaky_relu,
    output_layer,
)
from .network import (
    ForwardTrace,
    NetworkConfig,
    backward,
    forward,
    init_params,
    min_window_length,
    n_parameters,
    param_shapes,
    predict,
)
from .serialize import load_model, save_model

__all__ = [
    "BACKEND",
    "ForwardTrace",
    "NetworkConfig",
    "available_backends",
    "avg_pool",
    "backward",
    "batch_norm",
    "conv1d",
    "dense",
    "dropout",
    "forward",
    "global_avg_pool",
    "init_params",
    "leaky_relu",
    "load_model",
    "min_window_length",
    "n_parameters",
    "output_layer",
    "param_shapes",
    "predict",
    "save_model",
]
