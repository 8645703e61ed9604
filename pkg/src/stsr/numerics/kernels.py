"""Backend selection for the convolution kernels.

The compiled Cython module is used when it imports; otherwise the numpy
implementation. Set ``STSR_KERNELS=python`` to force the fallback.
"""

import os

import numpy as np

from . import _conv_py

BACKEND = "python"
_impl = _conv_py

if os.environ.get("STSR_KERNELS", "").lower() != "python":
    try:
        from . import _conv_ext as _impl  # type: ignore[no-redef]

        BACKEND = "cython"
    except ImportError:  # extension not built
        _impl = _conv_py


def use(backend: str) -> None:
    """Switch backend at runtime ("cython" or "python")."""
    global _impl, BACKEND
    if backend == "python":
        _impl, BACKEND = _conv_py, "python"
    elif backend == "cython":
        from . import _conv_ext

        _impl, BACKEND = _conv_ext, "cython"
    else:
        raise ValueError(f"unknown kernel backend {backend!r}")


def conv2d_forward(x, w, stride, padding):
    return _impl.conv2d_forward(np.ascontiguousarray(x), np.ascontiguousarray(w), stride, padding)


def conv2d_backward_input(g, w, x_shape, stride, padding):
    return _impl.conv2d_backward_input(np.ascontiguousarray(g), np.ascontiguousarray(w), tuple(x_shape), stride, padding)


def conv2d_backward_weight(g, x, w_shape, stride, padding):
    return _impl.conv2d_backward_weight(np.ascontiguousarray(g), np.ascontiguousarray(x), tuple(w_shape), stride, padding)
