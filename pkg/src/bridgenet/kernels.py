"""Kernel backend selection.

The compiled extension is used when it was built; otherwise the numpy
fallback is loaded. ``BRIDGENET_KERNELS=numpy`` forces the fallback and
``BRIDGENET_KERNELS=compiled`` makes a missing extension an import error.
"""
import importlib
import os

import numpy as np

_BACKENDS = {"compiled": "bridgenet._ckernels", "numpy": "bridgenet._pykernels"}


def _load(name):
    return importlib.import_module(_BACKENDS[name])


def available_backends():
    names = []
    for name in _BACKENDS:
        try:
            _load(name)
        except ImportError:
            continue
        names.append(name)
    return names


def _select():
    requested = os.environ.get("BRIDGENET_KERNELS", "auto").lower()
    if requested in _BACKENDS:
        return requested, _load(requested)
    if requested != "auto":
        raise ImportError(f"unknown BRIDGENET_KERNELS value {requested!r}")
    try:
        return "compiled", _load("compiled")
    except ImportError:
        return "numpy", _load("numpy")


backend_name, _impl = _select()


def use_backend(name):
    """Switch the active backend; returns the previous backend name."""
    global backend_name, _impl
    previous = backend_name
    _impl = _load(name)
    backend_name = name
    return previous


def im2col(x, kh, kw, stride, out_h, out_w):
    x = np.ascontiguousarray(x, dtype=np.float64)
    return _impl.im2col(x, kh, kw, stride, out_h, out_w)


def col2im(cols, shape, kh, kw, stride, out_h, out_w):
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    B, C, H, W = shape
    return _impl.col2im(cols, B, C, H, W, kh, kw, stride, out_h, out_w)
