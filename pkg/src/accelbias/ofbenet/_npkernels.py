"""numpy implementations of the hot kernels (used when the extension is absent)."""

import numpy as np


def conv1d_forward(x, w, b):
    B, T, _ = x.shape
    m, _, co = w.shape
    tp = T - m + 1
    z = np.empty((B, tp, co))
    z[...] = b
    for j in range(m):
        z += x[:, j : j + tp, :] @ w[j]
    return z


def conv1d_backward(x, w, dz, need_dx=True):
    B, T, ci = x.shape
    m, _, co = w.shape
    tp = T - m + 1
    dx = np.zeros_like(x) if need_dx else None
    dw = np.empty_like(w)
    dz2 = dz.reshape(B * tp, co)
    for j in range(m):
        dw[j] = x[:, j : j + tp, :].reshape(B * tp, ci).T @ dz2
        if need_dx:
            dx[:, j : j + tp, :] += dz @ w[j].T
    return dx, dw, dz2.sum(axis=0)


def avg_pool_forward(z, pool):
    B, T, C = z.shape
    L = T // pool
    return z[:, : L * pool, :].reshape(B, L, pool, C).mean(axis=2)


def avg_pool_backward(dy, pool, T):
    B, L, C = dy.shape
    dz = np.zeros((B, T, C))
    dz[:, : L * pool, :] = np.repeat(dy / pool, pool, axis=1)
    return dz
