"""Backend selection for the convolution hot loops.

Two implementations of the same kernel API exist: a numba-compiled one
(`kernels_numba`) and a pure-numpy one (`kernels_numpy`, BLAS-backed via
einsum). The active backend is chosen once at import time from the
``DEEPSUM_BACKEND`` environment variable:

    DEEPSUM_BACKEND=numba   force the numba kernels (error if numba missing)
    DEEPSUM_BACKEND=numpy   force the pure-numpy kernels
    unset                   numba if importable, numpy otherwise

Kernel API (all float64, channels-last):

    conv2d_forward(x[B,H,W,Ci], k[kh,kw,Ci,Co]) -> y[B,Ho,Wo,Co]       (valid)
    conv2d_backward(x, k, gy) -> (gx, gk)
    conv3d_forward(x[B,D,H,W,Ci], k[kd,kh,kw,Ci,Co], sd) -> y          (valid)
    conv3d_backward(x, k, gy, sd) -> (gx, gk)
"""

import os

_FORCED = os.environ.get("DEEPSUM_BACKEND", "").strip().lower()

if _FORCED not in ("", "numba", "numpy"):
    raise RuntimeError(
        f"DEEPSUM_BACKEND must be 'numba' or 'numpy', got {_FORCED!r}"
    )

if _FORCED == "numpy":
    from . import kernels_numpy as kernels
    BACKEND = "numpy"
elif _FORCED == "numba":
    from . import kernels_numba as kernels
    BACKEND = "numba"
else:
    try:
        from . import kernels_numba as kernels
        BACKEND = "numba"
    except ImportError:
        from . import kernels_numpy as kernels
        BACKEND = "numpy"

conv2d_forward = kernels.conv2d_forward
conv2d_backward = kernels.conv2d_backward
conv3d_forward = kernels.conv3d_forward
conv3d_backward = kernels.conv3d_backward
