"""Hot convolution kernels with backend selection at import time.

The compiled Cython core is preferred; if it failed to build we fall back
to the NumPy implementation. Both expose the same two functions with
identical semantics (see ``numpy_backend``).
"""

from . import numpy_backend

try:
    from . import _fastcore

    _impl = _fastcore
    BACKEND = "cython"
except ImportError:
    _impl = numpy_backend
    BACKEND = "numpy"


def im2col(x, kh, kw, stride, pad_top, pad_left, out_h, out_w):
    return _impl.im2col(x, kh, kw, stride, pad_top, pad_left, out_h, out_w)


def col2im(cols, n, h, w, c, kh, kw, stride, pad_top, pad_left, out_h, out_w):
    return _impl.col2im(cols, n, h, w, c, kh, kw, stride, pad_top, pad_left, out_h, out_w)


def use_backend(name):
    """Force a backend ('cython' or 'numpy'); mostly for tests and benchmarks."""
    global _impl, BACKEND
    if name == "numpy":
        _impl, BACKEND = numpy_backend, "numpy"
    elif name == "cython":
        from . import _fastcore as fc

        _impl, BACKEND = fc, "cython"
    else:
        raise ValueError(f"unknown kernel backend: {name!r}")
