"""Backend dispatch for the hot numeric kernels.

Two interchangeable implementations exist: a numba-jitted one (default when
numba imports cleanly) and a pure-numpy fallback. Selection happens once at
import from the LKDETR_BACKEND env var ("numba" or "numpy") and can be
changed programmatically with set_backend(); benchmarks/bench_kernels.py
compares the two.
"""

import os

from . import numpy_backend

_BACKENDS = {"numpy": numpy_backend}
try:
    from . import numba_backend

    _BACKENDS["numba"] = numba_backend
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba_backend = None

_active_name = None
_active = None


def available_backends():
    return sorted(_BACKENDS)


def set_backend(name):
    global _active_name, _active
    if name not in _BACKENDS:
        raise ValueError(
            f"unknown kernel backend {name!r}; available: {available_backends()}")
    _active_name = name
    _active = _BACKENDS[name]


def get_backend():
    return _active_name


def _initial_backend():
    env = os.environ.get("LKDETR_BACKEND", "").strip().lower()
    if env:
        if env not in _BACKENDS:
            raise ValueError(
                f"LKDETR_BACKEND={env!r} is not one of {available_backends()}")
        return env
    return "numba" if "numba" in _BACKENDS else "numpy"


set_backend(_initial_backend())


def conv2d_forward(x, w, stride, padding, dilation, groups):
    return _active.conv2d_forward(x, w, stride, padding, dilation, groups)


def conv2d_backward_input(gy, w, x_shape, stride, padding, dilation, groups):
    return _active.conv2d_backward_input(gy, w, x_shape, stride, padding,
                                         dilation, groups)


def conv2d_backward_weight(gy, x, w_shape, stride, padding, dilation, groups):
    return _active.conv2d_backward_weight(gy, x, w_shape, stride, padding,
                                          dilation, groups)


def bilinear_forward(feat, pts):
    return _active.bilinear_forward(feat, pts)


def bilinear_backward(feat, pts, gout):
    return _active.bilinear_backward(feat, pts, gout)
