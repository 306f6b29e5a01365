"""Hot kernels with a compiled implementation and a numpy fallback.

The compiled extension is picked at import when it has been built and
``MSGL_PURE_PYTHON`` is unset. Both share one contract, so callers never
need to know which one runs. The compiled path handles float64 only; other
dtypes always take the numpy route.
"""
from __future__ import annotations

import contextlib
import os

import numpy as np

from . import _rgrn_numpy

try:
    if os.environ.get("MSGL_PURE_PYTHON"):
        raise ImportError("compiled kernels disabled by MSGL_PURE_PYTHON")
    from . import _rgrn_ext
except ImportError:
    _rgrn_ext = None

_backends = {"numpy": _rgrn_numpy}
if _rgrn_ext is not None:
    _backends["compiled"] = _rgrn_ext

_current = "compiled" if _rgrn_ext is not None else "numpy"


def available_backends():
    return sorted(_backends)


def backend_name():
    return _current


def set_backend(name):
    """Select the kernel implementation; returns the previous name."""
    global _current
    if name not in _backends:
        raise ValueError(f"unknown or unavailable kernel backend {name!r}")
    prev, _current = _current, name
    return prev


@contextlib.contextmanager
def use_backend(name):
    prev = set_backend(name)
    try:
        yield
    finally:
        set_backend(prev)


def _impl(dtype):
    if dtype != np.float64:
        return _rgrn_numpy
    return _backends[_current]


def rgrn_forward(X, A, Wx, Wh, b, Wg, bg, rmask=None):
    return _impl(X.dtype).rgrn_forward(X, A, Wx, Wh, b, Wg, bg, rmask)


def rgrn_backward(cache, dH, need_dx=False):
    return _impl(cache[0].dtype).rgrn_backward(cache, dH, need_dx)
