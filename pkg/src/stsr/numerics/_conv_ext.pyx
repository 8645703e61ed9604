# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels: C im2col/col2im around BLAS dgemm.

Same contract as ``_conv_py``: float64 NCHW input, OIHW weights, zero
padding, integer stride. Row-major matrices are handed to column-major
dgemm as their transposes. One dgemm per sample keeps the reduction order
fixed, so results repeat bit for bit.
"""

import numpy as np
cimport numpy as cnp
from libc.string cimport memset
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()


cdef void _im2col(const double* x, double* cols, int C, int H, int W, int kh, int kw,
                  int Ho, int Wo, int stride, int padding) noexcept nogil:
    cdef int c, i, j, ho, wo, hi, wi
    cdef double* row
    cdef const double* xc
    for c in range(C):
        xc = x + c * H * W
        for i in range(kh):
            for j in range(kw):
                row = cols + ((c * kh + i) * kw + j) * Ho * Wo
                for ho in range(Ho):
                    hi = ho * stride - padding + i
                    if hi < 0 or hi >= H:
                        memset(row + ho * Wo, 0, Wo * sizeof(double))
                        continue
                    for wo in range(Wo):
                        wi = wo * stride - padding + j
                        if wi < 0 or wi >= W:
                            row[ho * Wo + wo] = 0.0
                        else:
                            row[ho * Wo + wo] = xc[hi * W + wi]


cdef void _col2im(const double* cols, double* gx, int C, int H, int W, int kh, int kw,
                  int Ho, int Wo, int stride, int padding) noexcept nogil:
    cdef int c, i, j, ho, wo, hi, wi
    cdef const double* row
    cdef double* gc
    for c in range(C):
        gc = gx + c * H * W
        for i in range(kh):
            for j in range(kw):
                row = cols + ((c * kh + i) * kw + j) * Ho * Wo
                for ho in range(Ho):
                    hi = ho * stride - padding + i
                    if hi < 0 or hi >= H:
                        continue
                    for wo in range(Wo):
                        wi = wo * stride - padding + j
                        if wi >= 0 and wi < W:
                            gc[hi * W + wi] += row[ho * Wo + wo]


def conv2d_forward(const double[:, :, :, ::1] x, const double[:, :, :, ::1] w,
                   int stride, int padding):
    cdef int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int Ho = (H + 2 * padding - kh) // stride + 1
    cdef int Wo = (W + 2 * padding - kw) // stride + 1
    cdef int K = C * kh * kw, N = Ho * Wo
    out_arr = np.empty((B, O, Ho, Wo), dtype=np.float64)
    cols_arr = np.empty((K, N), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, ::1] cols = cols_arr
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N'
    cdef int b
    with nogil:
        for b in range(B):
            _im2col(&x[b, 0, 0, 0], &cols[0, 0], C, H, W, kh, kw, Ho, Wo, stride, padding)
            # out_b (O x N) = w (O x K) @ cols (K x N)
            dgemm(&tn, &tn, &N, &O, &K, &one, &cols[0, 0], &N, <double*>&w[0, 0, 0, 0], &K,
                  &zero, &out[b, 0, 0, 0], &N)
    return out_arr


def conv2d_backward_input(const double[:, :, :, ::1] g, const double[:, :, :, ::1] w,
                          tuple x_shape, int stride, int padding):
    cdef int B = x_shape[0], C = x_shape[1], H = x_shape[2], W = x_shape[3]
    cdef int O = w.shape[0], kh = w.shape[2], kw = w.shape[3]
    cdef int Ho = g.shape[2], Wo = g.shape[3]
    cdef int K = C * kh * kw, N = Ho * Wo
    gx_arr = np.zeros((B, C, H, W), dtype=np.float64)
    cols_arr = np.empty((K, N), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef double[:, ::1] cols = cols_arr
    cdef double one = 1.0, zero = 0.0
    cdef char tn = b'N', tt = b'T'
    cdef int b
    with nogil:
        for b in range(B):
            # dcols (K x N) = w^T (K x O) @ g_b (O x N)
            dgemm(&tn, &tt, &N, &K, &O, &one, <double*>&g[b, 0, 0, 0], &N,
                  <double*>&w[0, 0, 0, 0], &K, &zero, &cols[0, 0], &N)
            _col2im(&cols[0, 0], &gx[b, 0, 0, 0], C, H, W, kh, kw, Ho, Wo, stride, padding)
    return gx_arr


def conv2d_backward_weight(const double[:, :, :, ::1] g, const double[:, :, :, ::1] x,
                           tuple w_shape, int stride, int padding):
    cdef int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3]
    cdef int O = w_shape[0], kh = w_shape[2], kw = w_shape[3]
    cdef int Ho = g.shape[2], Wo = g.shape[3]
    cdef int K = C * kh * kw, N = Ho * Wo
    gw_arr = np.zeros((O, C, kh, kw), dtype=np.float64)
    cols_arr = np.empty((K, N), dtype=np.float64)
    cdef double[:, :, :, ::1] gw = gw_arr
    cdef double[:, ::1] cols = cols_arr
    cdef double one = 1.0
    cdef char tn = b'N', tt = b'T'
    cdef int b
    with nogil:
        for b in range(B):
            _im2col(&x[b, 0, 0, 0], &cols[0, 0], C, H, W, kh, kw, Ho, Wo, stride, padding)
            # gw (O x K) += g_b (O x N) @ cols^T (N x K)
            dgemm(&tt, &tn, &K, &O, &N, &one, &cols[0, 0], &N, <double*>&g[b, 0, 0, 0], &N,
                  &one, &gw[0, 0, 0, 0], &K)
    return gw_arr
