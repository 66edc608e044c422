"""Kernel backend selection.

The compiled extension is used when it imports; set ``ACCELBIAS_BACKEND=numpy``
to force the numpy kernels. Both backends expose the same four functions.
"""

import os

import numpy as np

from . import _npkernels

_FUNCS = ("conv1d_forward", "conv1d_backward", "avg_pool_forward", "avg_pool_backward")


def _load(name):
    if name == "numpy":
        return _npkernels
    if name == "cython":
        from . import _ckernels

        return _ckernels
    raise ValueError(f"unknown kernel backend {name!r}")


def available_backends():
    names = ["numpy"]
    try:
        _load("cython")
        names.insert(0, "cython")
    except ImportError:
        pass
    return names


def _select():
    wanted = os.environ.get("ACCELBIAS_BACKEND", "").strip().lower()
    if wanted:
        return wanted, _load(wanted)
    try:
        return "cython", _load("cython")
    except ImportError:
        return "numpy", _npkernels


BACKEND, _impl = _select()


def get_backend(name=None):
    """Module exposing the kernel functions; the active one when ``name`` is None."""
    return _impl if name is None else _load(name)


def _c(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def conv1d_forward(x, w, b):
    return _impl.conv1d_forward(_c(x), _c(w), _c(b))


def conv1d_backward(x, w, dz, need_dx=True):
    return _impl.conv1d_backward(_c(x), _c(w), _c(dz), need_dx)


def avg_pool_forward(z, pool):
    return _impl.avg_pool_forward(_c(z), int(pool))


def avg_pool_backward(dy, pool, T):
    return _impl.avg_pool_backward(_c(dy), int(pool), int(T))
