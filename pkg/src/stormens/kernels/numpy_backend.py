"""Pure-NumPy implementations of the convolution gather/scatter kernels.

Used when the compiled extension is unavailable; also the reference the
compiled kernels are tested against.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def _pad_ends(size, k, stride, pad_beg, out):
    """Padding needed past the end so every window fits."""
    return max((out - 1) * stride + k - pad_beg - size, 0)


def im2col(x, kh, kw, stride, pad_top, pad_left, out_h, out_w):
    """Gather kh x kw patches of x (NHWC) into (N*out_h*out_w, kh*kw*C)."""
    n, h, w, c = x.shape
    pad_bot = _pad_ends(h, kh, stride, pad_top, out_h)
    pad_right = _pad_ends(w, kw, stride, pad_left, out_w)
    xp = np.pad(x, ((0, 0), (pad_top, pad_bot), (pad_left, pad_right), (0, 0)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))  # (n, H', W', c, kh, kw)
    win = win[:, ::stride, ::stride]
    win = win[:, :out_h, :out_w]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * out_h * out_w, kh * kw * c)
    return np.ascontiguousarray(cols)


def col2im(cols, n, h, w, c, kh, kw, stride, pad_top, pad_left, out_h, out_w):
    """Scatter-add the column matrix back onto an (N, H, W, C) grid."""
    pad_bot = _pad_ends(h, kh, stride, pad_top, out_h)
    pad_right = _pad_ends(w, kw, stride, pad_left, out_w)
    xp = np.zeros((n, h + pad_top + pad_bot, w + pad_left + pad_right, c), dtype=cols.dtype)
    cols6 = cols.reshape(n, out_h, out_w, kh, kw, c)
    for di in range(kh):
        for dj in range(kw):
            xp[:, di:di + out_h * stride:stride, dj:dj + out_w * stride:stride, :] += (
                cols6[:, :, :, di, dj, :]
            )
    return np.ascontiguousarray(xp[:, pad_top:pad_top + h, pad_left:pad_left + w, :])
