"""Numba-compiled convolution kernels (valid padding, channels-last).

Same API as `kernels_numpy`. Loops keep the output-channel axis innermost
so it vectorizes; everything is float64 and serial, hence bit-reproducible
run to run.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def conv2d_forward(x, k):
    B, H, W, Ci = x.shape
    kh, kw, _, Co = k.shape
    Ho = H - kh + 1
    Wo = W - kw + 1
    y = np.zeros((B, Ho, Wo, Co))
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for a in range(kh):
                    for c in range(kw):
                        for ci in range(Ci):
                            v = x[b, i + a, j + c, ci]
                            for co in range(Co):
                                y[b, i, j, co] += v * k[a, c, ci, co]
    return y


@njit(cache=True, fastmath=True)
def conv2d_backward(x, k, gy):
    B, H, W, Ci = x.shape
    kh, kw, _, Co = k.shape
    Ho = H - kh + 1
    Wo = W - kw + 1
    gx = np.zeros_like(x)
    gk = np.zeros_like(k)
    for b in range(B):
        for i in range(Ho):
            for j in range(Wo):
                for a in range(kh):
                    for c in range(kw):
                        for ci in range(Ci):
                            v = x[b, i + a, j + c, ci]
                            acc = 0.0
                            for co in range(Co):
                                g = gy[b, i, j, co]
                                gk[a, c, ci, co] += v * g
                                acc += g * k[a, c, ci, co]
                            gx[b, i + a, j + c, ci] += acc
    return gx, gk


@njit(cache=True, fastmath=True)
def conv3d_forward(x, k, sd):
    B, D, H, W, Ci = x.shape
    kd, kh, kw, _, Co = k.shape
    Do = (D - kd) // sd + 1
    Ho = H - kh + 1
    Wo = W - kw + 1
    y = np.zeros((B, Do, Ho, Wo, Co))
    for b in range(B):
        for d in range(Do):
            for i in range(Ho):
                for j in range(Wo):
                    for e in range(kd):
                        for a in range(kh):
                            for c in range(kw):
                                for ci in range(Ci):
                                    v = x[b, d * sd + e, i + a, j + c, ci]
                                    for co in range(Co):
                                        y[b, d, i, j, co] += v * k[e, a, c, ci, co]
    return y


@njit(cache=True, fastmath=True)
def conv3d_backward(x, k, gy, sd):
    B, D, H, W, Ci = x.shape
    kd, kh, kw, _, Co = k.shape
    Do = (D - kd) // sd + 1
    Ho = H - kh + 1
    Wo = W - kw + 1
    gx = np.zeros_like(x)
    gk = np.zeros_like(k)
    for b in range(B):
        for d in range(Do):
            for i in range(Ho):
                for j in range(Wo):
                    for e in range(kd):
                        for a in range(kh):
                            for c in range(kw):
                                for ci in range(Ci):
                                    v = x[b, d * sd + e, i + a, j + c, ci]
                                    acc = 0.0
                                    for co in range(Co):
                                        g = gy[b, d, i, j, co]
                                        gk[e, a, c, ci, co] += v * g
                                        acc += g * k[e, a, c, ci, co]
                                    gx[b, d * sd + e, i + a, j + c, ci] += acc
    return gx, gk
