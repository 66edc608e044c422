"""OFBENet forward and backward passes.

Three blocks of conv -> batch norm -> LeakyReLU -> average pool, then global
average pooling, a dense layer, dropout and a linear 3-output head. The dense
layer has no activation.
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import _rng
from ..errors import InvalidArgumentError, ShapeError, StateError
from . import kernels
from .layers import (
    batch_norm,
    batch_norm_backward,
    dropout,
    leaky_relu,
    leaky_relu_backward,
)


@dataclass(frozen=True)
class NetworkConfig:
    channels: tuple = (3, 8, 32, 64)
    kernel_size: int = 5
    pool: int = 4
    hidden: int = 32
    keep_prob: float = 0.8
    bn_eps: float = 1e-5
    bn_momentum: float = 0.9
    alpha: float = 0.1
    window_len: int = 3000
    input_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if len(self.channels) < 2 or self.channels[0] != 3:
            raise InvalidArgumentError(f"channel plan must start at 3 input axes, got {self.channels}")
        if self.kernel_size < 1 or self.pool < 1 or self.hidden < 1:
            raise InvalidArgumentError("kernel size, pool and hidden width must be >= 1")
        if not 0 < self.keep_prob <= 1:
            raise InvalidArgumentError("keep_prob must lie in (0, 1]")
        if self.window_len < min_window_length(self):
            raise ShapeError(
                f"window length {self.window_len} is below the minimum {min_window_length(self)} for this network"
            )

    @property
    def n_blocks(self):
        return len(self.channels) - 1

    def to_dict(self):
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d


def min_window_length(config) -> int:
    """Shortest input that still leaves one time step after the last pool."""
    need = 1
    for _ in range(len(config.channels) - 1):
        need = need * config.pool + config.kernel_size - 1
    return need


def param_shapes(config: NetworkConfig):
    shapes = OrderedDict()
    m = config.kernel_size
    for i in range(config.n_blocks):
        cin, cout = config.channels[i], config.channels[i + 1]
        n = i + 1
        shapes[f"conv{n}.weight"] = (m, cin, cout)
        shapes[f"conv{n}.bias"] = (cout,)
        shapes[f"bn{n}.gamma"] = (cout,)
        shapes[f"bn{n}.beta"] = (cout,)
        shapes[f"bn{n}.running_mean"] = (cout,)
        shapes[f"bn{n}.running_var"] = (cout,)
    shapes["dense.weight"] = (config.channels[-1], config.hidden)
    shapes["dense.bias"] = (config.hidden,)
    shapes["out.weight"] = (config.hidden, 3)
    shapes["out.bias"] = (3,)
    return shapes


def is_trainable(name):
    return not (name.endswith("running_mean") or name.endswith("running_var"))


def init_params(config: NetworkConfig, seed=0):
    """Fan-in scaled normal weights, zero biases, unit gamma, zero beta."""
    rng = _rng.make_rng(_rng.derive_seed(seed, _rng.INIT))
    params = OrderedDict()
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = int(np.prod(shape[:-1]))
            params[name] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        elif name.endswith("gamma") or name.endswith("running_var"):
            params[name] = np.ones(shape)
        else:
            params[name] = np.zeros(shape)
    return params


def check_params(params, config):
    for name, shape in param_shapes(config).items():
        if name not in params:
            raise StateError(f"missing parameter {name}")
        if params[name].shape != shape:
            raise StateError(f"parameter {name} has shape {params[name].shape}, expected {shape}")
    extra = set(params) - set(param_shapes(config))
    if extra:
        raise StateError(f"unexpected parameters {sorted(extra)}")


@dataclass(eq=False)
class ForwardTrace:
    config: NetworkConfig
    shapes: dict
    conv_inputs: list = field(default_factory=list)
    bn_caches: list = field(default_factory=list)
    pre_activations: list = field(default_factory=list)
    pool_lengths: list = field(default_factory=list)
    gap_length: int = 0
    h: np.ndarray = None
    dense_out: np.ndarray = None
    dropout_mask: np.ndarray = None
    head_input: np.ndarray = None

    def running_stats(self):
        """Updated batch-norm running estimates, keyed like the parameters."""
        out = {}
        for i, cache in enumerate(self.bn_caches, start=1):
            out[f"bn{i}.running_mean"] = cache["running_mean"]
            out[f"bn{i}.running_var"] = cache["running_var"]
        return out


def forward(params, x, config: NetworkConfig, mode="inference", rng=None, dropout_mask=None):
    """Predict biases for a batch ``(B, T, 3)`` (or a single ``(T, 3)`` window).

    Returns ``(predictions, trace)``; ``trace`` is None in inference mode.
    Training mode needs ``rng`` or ``dropout_mask`` for the dropout draw.
    """
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 2
    if single:
        x = x[None]
    if x.ndim != 3 or x.shape[2] != 3:
        raise ShapeError(f"expected windows shaped (B, T, 3), got {x.shape}")
    if x.shape[1] < min_window_length(config):
        raise ShapeError(f"window length {x.shape[1]} is below the minimum {min_window_length(config)}")
    if mode not in ("training", "inference"):
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    training = mode == "training"
    trace = ForwardTrace(config, {k: v.shape for k, v in params.items()}) if training else None

    a = x * config.input_scale if config.input_scale != 1.0 else x
    for i in range(1, config.n_blocks + 1):
        z = kernels.conv1d_forward(a, params[f"conv{i}.weight"], params[f"conv{i}.bias"])
        if training:
            trace.conv_inputs.append(a)
        bn, cache = batch_norm(
            z,
            params[f"bn{i}.gamma"],
            params[f"bn{i}.beta"],
            mode,
            params[f"bn{i}.running_mean"],
            params[f"bn{i}.running_var"],
            config.bn_eps,
            config.bn_momentum,
        )
        act = leaky_relu(bn, config.alpha)
        if training:
            trace.bn_caches.append(cache)
            trace.pre_activations.append(bn)
            trace.pool_lengths.append(act.shape[1])
        a = kernels.avg_pool_forward(act, config.pool)

    h = a.mean(axis=1)
    dz = h @ params["dense.weight"] + params["dense.bias"]
    hd, mask = dropout(dz, config.keep_prob, mode, rng=rng, mask=dropout_mask)
    y = hd @ params["out.weight"] + params["out.bias"]
    if training:
        trace.gap_length = a.shape[1]
        trace.h = h
        trace.dense_out = dz
        trace.dropout_mask = mask
        trace.head_input = hd
    return (y[0] if single else y), trace


def predict(params, x, config: NetworkConfig, batch_size=64):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return forward(params, x, config)[0]
    out = [forward(params, x[i : i + batch_size], config)[0] for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.empty((0, 3))


def backward(params, trace: ForwardTrace, output_gradient):
    """Gradients of ``sum(output_gradient * predictions)`` for every trainable tensor."""
    if trace is None:
        raise StateError("backward needs the trace of a training-mode forward pass")
    config = trace.config
    for name, shape in param_shapes(config).items():
        if name not in params or params[name].shape != shape or trace.shapes.get(name) != shape:
            raise StateError(f"trace and parameters disagree on {name}")
    dy = np.asarray(output_gradient, dtype=np.float64)
    if dy.ndim == 1:
        dy = dy[None]
    if dy.shape != (trace.h.shape[0], 3):
        raise ShapeError(f"output gradient {dy.shape} does not match batch ({trace.h.shape[0]}, 3)")

    grads = OrderedDict()
    grads["out.weight"] = trace.head_input.T @ dy
    grads["out.bias"] = dy.sum(axis=0)
    dhd = dy @ params["out.weight"].T
    ddense = dhd * trace.dropout_mask / config.keep_prob
    grads["dense.weight"] = trace.h.T @ ddense
    grads["dense.bias"] = ddense.sum(axis=0)
    dh = ddense @ params["dense.weight"].T

    B = dh.shape[0]
    da = np.broadcast_to(dh[:, None, :] / trace.gap_length, (B, trace.gap_length, dh.shape[1]))
    for i in range(config.n_blocks, 0, -1):
        dact = kernels.avg_pool_backward(da, config.pool, trace.pool_lengths[i - 1])
        dbn = leaky_relu_backward(dact, trace.pre_activations[i - 1], config.alpha)
        dz, dgamma, dbeta = batch_norm_backward(dbn, params[f"bn{i}.gamma"], trace.bn_caches[i - 1])
        grads[f"bn{i}.gamma"] = dgamma
        grads[f"bn{i}.beta"] = dbeta
        da, dw, db = kernels.conv1d_backward(trace.conv_inputs[i - 1], params[f"conv{i}.weight"], dz, need_dx=i > 1)
        grads[f"conv{i}.weight"] = dw
        grads[f"conv{i}.bias"] = db
    order = [n for n in param_shapes(config) if is_trainable(n)]
    return OrderedDict((n, grads[n]) for n in order)


def n_parameters(config, trainable_only=True):
    return sum(
        int(np.prod(s)) for n, s in param_shapes(config).items() if is_trainable(n) or not trainable_only
    )
