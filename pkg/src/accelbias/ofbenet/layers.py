"""Individual OFBENet layers.

All functions work on batched arrays shaped (batch, time, channel); a 2-D
(time, channel) input is treated as a batch of one and returned 2-D.
"""

from __future__ import annotations

import numpy as np

from ..errors import InvalidArgumentError, ShapeError
from . import kernels

LEAKY_ALPHA = 0.1
BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def _batched(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim != 3:
        raise ShapeError(f"expected (T, C) or (B, T, C), got shape {x.shape}")
    return x, False


def conv1d(x, kernel, bias):
    """Valid convolution: ``Z[i, k] = sum_j sum_c x[i + j, c] w[j, c, k] + b[k]``."""
    xb, single = _batched(x)
    kernel = np.asarray(kernel, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if kernel.ndim != 3 or kernel.shape[1] != xb.shape[2] or bias.shape != (kernel.shape[2],):
        raise ShapeError(f"kernel {kernel.shape} / bias {bias.shape} do not fit input channels {xb.shape[2]}")
    m = kernel.shape[0]
    if xb.shape[1] < m:
        raise ShapeError(f"input length {xb.shape[1]} is shorter than the kernel ({m})")
    z = kernels.conv1d_forward(xb, kernel, bias)
    return z[0] if single else z


def batch_norm(z, gamma, beta, mode="inference", running_mean=None, running_var=None, eps=BN_EPS, momentum=BN_MOMENTUM):
    """Per-channel normalisation.

    Training mode normalises with the batch statistics taken over batch and
    time and returns ``(out, cache)``; ``cache`` holds the statistics and the
    exponentially averaged running estimates. Inference mode uses the running
    statistics and returns ``(out, None)``.
    """
    zb, single = _batched(z)
    if mode == "training":
        mu = zb.mean(axis=(0, 1))
        var = zb.var(axis=(0, 1))
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (zb - mu) * inv_std
        out = gamma * xhat + beta
        rm = mu if running_mean is None else momentum * running_mean + (1.0 - momentum) * mu
        rv = var if running_var is None else momentum * running_var + (1.0 - momentum) * var
        cache = {"xhat": xhat, "inv_std": inv_std, "mean": mu, "var": var, "running_mean": rm, "running_var": rv}
    elif mode == "inference":
        if running_mean is None or running_var is None:
            raise InvalidArgumentError("inference mode needs running statistics")
        out = gamma * (zb - running_mean) / np.sqrt(running_var + eps) + beta
        cache = None
    else:
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    return (out[0] if single else out), cache


def batch_norm_backward(dout, gamma, cache):
    xhat, inv_std = cache["xhat"], cache["inv_std"]
    n = xhat.shape[0] * xhat.shape[1]
    dgamma = np.einsum("btc,btc->c", dout, xhat)
    dbeta = dout.sum(axis=(0, 1))
    dxhat = dout * gamma
    dz = (inv_std / n) * (n * dxhat - dxhat.sum(axis=(0, 1)) - xhat * np.einsum("btc,btc->c", dxhat, xhat))
    return dz, dgamma, dbeta


def leaky_relu(z, alpha=LEAKY_ALPHA):
    z = np.asarray(z, dtype=np.float64)
    return np.where(z >= 0, z, alpha * z)


def leaky_relu_backward(dout, z, alpha=LEAKY_ALPHA):
    return np.where(z >= 0, dout, alpha * dout)


def avg_pool(z, pool, stride=None):
    """Mean over windows of ``pool`` steps; a trailing remainder is dropped."""
    zb, single = _batched(z)
    stride = pool if stride is None else stride
    if pool < 1 or stride < 1:
        raise InvalidArgumentError("pool size and stride must be >= 1")
    if zb.shape[1] < pool:
        raise ShapeError(f"input length {zb.shape[1]} is shorter than the pool ({pool})")
    if stride == pool:
        y = kernels.avg_pool_forward(zb, pool)
    else:
        n_out = (zb.shape[1] - pool) // stride + 1
        y = np.stack([zb[:, i * stride : i * stride + pool].mean(axis=1) for i in range(n_out)], axis=1)
    return y[0] if single else y


def global_avg_pool(y):
    yb, single = _batched(y)
    h = yb.mean(axis=1)
    return h[0] if single else h


def dense(h, weights, bias):
    h = np.asarray(h, dtype=np.float64)
    if h.shape[-1] != weights.shape[0] or bias.shape != (weights.shape[1],):
        raise ShapeError(f"dense weights {weights.shape} / bias {bias.shape} do not fit input {h.shape}")
    return h @ weights + bias


def dropout(h, keep_prob, mode="inference", rng=None, mask=None):
    """Inverted dropout: training multiplies by ``Bernoulli(keep_prob) / keep_prob``.

    Returns ``(out, mask)``; inference is the identity with ``mask=None``.
    """
    h = np.asarray(h, dtype=np.float64)
    if not 0 < keep_prob <= 1:
        raise InvalidArgumentError(f"keep probability must lie in (0, 1], got {keep_prob}")
    if mode == "inference":
        return h, None
    if mode != "training":
        raise InvalidArgumentError(f"unknown mode {mode!r}")
    if mask is None:
        if rng is None:
            raise InvalidArgumentError("training-mode dropout needs an rng or an explicit mask")
        mask = (rng.random(h.shape) < keep_prob).astype(np.float64)
    elif mask.shape != h.shape:
        raise ShapeError(f"dropout mask {mask.shape} does not match input {h.shape}")
    return h * mask / keep_prob, mask


def output_layer(h, weights, bias):
    return dense(h, weights, bias)
