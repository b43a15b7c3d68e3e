"""Pure-numpy convolution kernels (valid padding, channels-last).

These are the fallback implementations of the backend kernel API; the
heavy contractions go through einsum so BLAS does the work. Shapes are
documented in `backend`.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, k):
    kh, kw, _, _ = k.shape
    # win: [B, Ho, Wo, Ci, kh, kw]
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    return np.einsum("bijckl,klcd->bijd", win, k, optimize=True)


def conv2d_backward(x, k, gy):
    kh, kw, _, _ = k.shape
    win = sliding_window_view(x, (kh, kw), axis=(1, 2))
    gk = np.einsum("bijckl,bijd->klcd", win, gy, optimize=True)
    # Full correlation of gy with the spatially flipped, channel-transposed
    # kernel recovers the input gradient.
    gyp = np.pad(gy, ((0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)))
    kf = k[::-1, ::-1].transpose(0, 1, 3, 2)
    gx = conv2d_forward(gyp, np.ascontiguousarray(kf))
    return gx, gk


def conv3d_forward(x, k, sd):
    kd, kh, kw, _, _ = k.shape
    # win: [B, Do_full, Ho, Wo, Ci, kd, kh, kw]
    win = sliding_window_view(x, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, ::sd]
    return np.einsum("bdijcekl,eklcf->bdijf", win, k, optimize=True)


def conv3d_backward(x, k, gy, sd):
    kd, kh, kw, _, _ = k.shape
    win = sliding_window_view(x, (kd, kh, kw), axis=(1, 2, 3))
    win = win[:, ::sd]
    gk = np.einsum("bdijcekl,bdijf->eklcf", win, gy, optimize=True)
    # Dilate the output gradient along depth to undo the stride, then run
    # a full correlation with the flipped kernel.
    B, Do, Ho, Wo, Co = gy.shape
    if sd > 1:
        gyd = np.zeros((B, (Do - 1) * sd + 1, Ho, Wo, Co), dtype=gy.dtype)
        gyd[:, ::sd] = gy
    else:
        gyd = gy
    gyp = np.pad(
        gyd,
        ((0, 0), (kd - 1, kd - 1), (kh - 1, kh - 1), (kw - 1, kw - 1), (0, 0)),
    )
    kf = k[::-1, ::-1, ::-1].transpose(0, 1, 2, 4, 3)
    gx = conv3d_forward(gyp, np.ascontiguousarray(kf), 1)
    return gx, gk
