"""Pure numpy convolution kernels (window gather + tensordot).

Reference implementation and fallback for the compiled ``_conv_ext``.
All arrays are float64, NCHW input, OIHW weights.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _out_size(n, k, stride, padding):
    return (n + 2 * padding - k) // stride + 1


def _windows(x, kh, kw, stride, padding):
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, w, stride, padding):
    kh, kw = w.shape[2:]
    win = _windows(x, kh, kw, stride, padding)
    out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def conv2d_backward_weight(g, x, w_shape, stride, padding):
    kh, kw = w_shape[2:]
    win = _windows(x, kh, kw, stride, padding)
    Ho, Wo = g.shape[2:]
    win = win[:, :, :Ho, :Wo]
    return np.ascontiguousarray(np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3])))


def conv2d_backward_input(g, w, x_shape, stride, padding):
    B, C, H, W = x_shape
    kh, kw = w.shape[2:]
    Ho, Wo = g.shape[2:]
    cols = np.tensordot(g, w, axes=([1], [0]))  # B, Ho, Wo, C, kh, kw
    gp = np.zeros((B, C, H + 2 * padding, W + 2 * padding))
    for i in range(kh):
        for j in range(kw):
            gp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        gp = gp[:, :, padding:padding + H, padding:padding + W]
    return np.ascontiguousarray(gp)
