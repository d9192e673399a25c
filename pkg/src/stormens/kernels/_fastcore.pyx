# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled gather/scatter kernels behind the strided convolution layers.

Layouts match the NumPy backend exactly: activations are NHWC contiguous,
column matrices are (N*out_h*out_w, kh*kw*C) with the channel index fastest.
"""

import numpy as np

from cython cimport floating


def im2col(floating[:, :, :, ::1] x, Py_ssize_t kh, Py_ssize_t kw,
           Py_ssize_t stride, Py_ssize_t pad_top, Py_ssize_t pad_left,
           Py_ssize_t out_h, Py_ssize_t out_w):
    """Gather kh x kw patches of x into a column matrix (zero padded)."""
    cdef Py_ssize_t n_b = x.shape[0]
    cdef Py_ssize_t h = x.shape[1]
    cdef Py_ssize_t w = x.shape[2]
    cdef Py_ssize_t c = x.shape[3]
    dtype = np.float32 if floating is float else np.float64
    cols_arr = np.zeros((n_b * out_h * out_w, kh * kw * c), dtype=dtype)
    cdef floating[:, ::1] cols = cols_arr
    cdef floating *src
    cdef floating *dst
    cdef Py_ssize_t n, oh, ow, di, dj, ih, row0, base, ow_lo, ow_hi, ch
    cdef Py_ssize_t row_stride = kh * kw * c
    for n in range(n_b):
        for oh in range(out_h):
            row0 = (n * out_h + oh) * out_w
            for di in range(kh):
                ih = oh * stride + di - pad_top
                if ih < 0 or ih >= h:
                    continue
                for dj in range(kw):
                    # valid ow range: 0 <= ow*stride + dj - pad_left < w
                    ow_lo = pad_left - dj
                    ow_lo = (ow_lo + stride - 1) // stride if ow_lo > 0 else 0
                    ow_hi = (w - 1 + pad_left - dj) // stride + 1
                    if ow_hi > out_w:
                        ow_hi = out_w
                    base = (di * kw + dj) * c
                    src = &x[n, ih, ow_lo * stride + dj - pad_left, 0]
                    dst = &cols[row0 + ow_lo, base]
                    for ow in range(ow_lo, ow_hi):
                        for ch in range(c):
                            dst[ch] = src[ch]
                        src += stride * c
                        dst += row_stride
    return cols_arr


def col2im(floating[:, ::1] cols, Py_ssize_t n_b, Py_ssize_t h, Py_ssize_t w,
           Py_ssize_t c, Py_ssize_t kh, Py_ssize_t kw, Py_ssize_t stride,
           Py_ssize_t pad_top, Py_ssize_t pad_left,
           Py_ssize_t out_h, Py_ssize_t out_w):
    """Scatter-add a column matrix back onto an (N, H, W, C) grid."""
    dtype = np.float32 if floating is float else np.float64
    x_arr = np.zeros((n_b, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] x = x_arr
    cdef Py_ssize_t n, oh, ow, di, dj, ch, ih, iw, row, base
    for n in range(n_b):
        for oh in range(out_h):
            for ow in range(out_w):
                row = (n * out_h + oh) * out_w + ow
                for di in range(kh):
                    ih = oh * stride + di - pad_top
                    if ih < 0 or ih >= h:
                        continue
                    for dj in range(kw):
                        iw = ow * stride + dj - pad_left
                        if iw < 0 or iw >= w:
                            continue
                        base = (di * kw + dj) * c
                        for ch in range(c):
                            x[n, ih, iw, ch] += cols[row, base + ch]
    return x_arr
