"""Dense float64 tensors with reverse-mode automatic differentiation.

Supplies exactly the operations the super-resolution graph needs:
broadcasting arithmetic, reductions, shape ops, leaky ReLU, softmax,
instance normalization, reflection padding and 2D/3D convolution (valid
or reflect-padded, with an optional temporal stride for the 3D case).

Convolution is cross-correlation (no kernel flip), the usual deep
learning convention. Reflection padding mirrors without repeating the
edge pixel: the value at distance d outside the border equals the value
at distance d inside.

Graphs are built per forward pass. Calling ``backward`` twice on the
same result without rebuilding the graph is an error.
"""

from __future__ import annotations

import numpy as np

from . import backend


class Tensor:
    """N-dimensional float64 array with an optional backward graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_done")

    def __init__(self, data, requires_grad=False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._done = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate gradients of this tensor into every reachable leaf.

        ``seed`` defaults to ones (use a scalar loss). Gradients add into
        ``.grad`` so separate losses accumulate like their sum would.
        """
        if self._done:
            raise RuntimeError("backward already ran on this graph; rebuild it first")
        if seed is None:
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError("seed shape does not match tensor shape")

        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))

        pending = {id(self): seed}
        for node in reversed(order):
            g = pending.pop(id(node), None)
            if g is None:
                continue
            if node.grad is None:
                node.grad = g.copy()
            else:
                node.grad = node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None or not p.requires_grad:
                    continue
                if id(p) in pending:
                    pending[id(p)] = pending[id(p)] + pg
                else:
                    pending[id(p)] = pg
            node._done = True
        self._done = True

    # -- operators ----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- arithmetic -------------------------------------------------------


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)),
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.data.shape), -_unbroadcast(g, b.data.shape)),
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return _make(
        a.data * b.data,
        (a, b),
        lambda g: (
            _unbroadcast(g * b.data, a.data.shape),
            _unbroadcast(g * a.data, b.data.shape),
        ),
    )


def neg(a):
    a = as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,))


def powc(a, p):
    """Elementwise power with a constant exponent."""
    a = as_tensor(a)
    return _make(
        a.data ** p,
        (a,),
        lambda g: (g * p * a.data ** (p - 1),),
    )


def log(a):
    a = as_tensor(a)
    return _make(np.log(a.data), (a,), lambda g: (g / a.data,))


# -- reductions -------------------------------------------------------


def tsum(a, axes=None, keepdims=False):
    a = as_tensor(a)
    if axes is not None:
        axes = tuple(np.atleast_1d(axes).tolist())
        for ax in axes:
            if ax < -a.ndim or ax >= a.ndim:
                raise ValueError(f"axis {ax} out of range for ndim {a.ndim}")

    def back(g):
        if axes is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make(a.data.sum(axis=axes, keepdims=keepdims), (a,), back)


def tmean(a, axes=None, keepdims=False):
    a = as_tensor(a)
    if axes is None:
        n = a.size
    else:
        axes_t = tuple(np.atleast_1d(axes).tolist())
        n = int(np.prod([a.data.shape[ax] for ax in axes_t]))
    return mul(tsum(a, axes, keepdims), 1.0 / n)


# -- shape ops --------------------------------------------------------


def reshape(a, shape):
    a = as_tensor(a)
    if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
        shape = tuple(shape[0])
    old = a.data.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),))


def transpose(a, axes):
    a = as_tensor(a)
    if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
        axes = tuple(axes[0])
    inv = tuple(np.argsort(axes))
    return _make(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a, idx):
    a = as_tensor(a)

    def back(g):
        gx = np.zeros_like(a.data)
        gx[idx] += g
        return (gx,)

    return _make(a.data[idx], (a,), back)


def take(a, indices, axis=0):
    """Gather along an axis; duplicate indices accumulate in the backward."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)

    def back(g):
        gx = np.zeros_like(a.data)
        gmoved = np.moveaxis(g, axis, 0)
        gxmoved = np.moveaxis(gx, axis, 0)
        np.add.at(gxmoved, indices, gmoved)
        return (gx,)

    return _make(np.take(a.data, indices, axis=axis), (a,), back)


def flip(a, axes):
    a = as_tensor(a)
    axes = tuple(np.atleast_1d(axes).tolist())
    return _make(np.flip(a.data, axes), (a,), lambda g: (np.flip(g, axes),))


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.ascontiguousarray(p) for p in np.split(g, splits, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


# -- nonlinearities ---------------------------------------------------


def leaky_relu(a, slope=0.2):
    a = as_tensor(a)
    mask = np.where(a.data >= 0, 1.0, slope)
    return _make(a.data * mask, (a,), lambda g: (g * mask,))


def softmax(a, axis=-1):
    a = as_tensor(a)
    if axis < -a.ndim or axis >= a.ndim:
        raise ValueError(f"axis {axis} out of range for ndim {a.ndim}")
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        dot = (g * y).sum(axis=axis, keepdims=True)
        return (y * (g - dot),)

    return _make(y, (a,), back)


# -- normalization ----------------------------------------------------


def instance_norm(a, eps=1e-10):
    """Zero mean, unit variance over the spatial axes, per sample per channel.

    Input layout is [B, *spatial, C]; the spatial extent must be at least 2.
    A constant channel maps to all zeros.
    """
    a = as_tensor(a)
    if a.ndim < 3:
        raise ValueError("instance_norm expects [B, *spatial, C]")
    axes = tuple(range(1, a.ndim - 1))
    extent = int(np.prod([a.data.shape[ax] for ax in axes]))
    if extent < 2:
        raise ValueError("instance_norm needs spatial extent > 1")
    mu = tmean(a, axes, keepdims=True)
    centered = sub(a, mu)
    var = tmean(mul(centered, centered), axes, keepdims=True)
    return mul(centered, powc(add(var, eps), -0.5))


# -- padding and convolution ------------------------------------------


def _reflect_pad_adjoint_axis(g, pad, axis):
    """Adjoint of 1D mirror padding along ``axis`` (no edge repeat)."""
    if pad == 0:
        return g
    n = g.shape[axis] - 2 * pad
    gm = np.moveaxis(g, axis, 0)
    r = gm[pad:pad + n].copy()
    # left pad index i (0..pad-1) came from source pad-i; right pad index j
    # (0..pad-1) came from source n-2-j
    r[1:pad + 1] += gm[:pad][::-1]
    r[n - 1 - pad:n - 1] += gm[pad + n:][::-1]
    return np.moveaxis(r, 0, axis)


def pad_reflect(a, pads, axes):
    """Mirror-pad (without edge repeat) the given axes by the given amounts."""
    a = as_tensor(a)
    pads = tuple(pads)
    axes = tuple(axes)
    for p, ax in zip(pads, axes):
        if p > a.data.shape[ax] - 1:
            raise ValueError("reflect pad larger than axis extent - 1")
    width = [(0, 0)] * a.ndim
    for p, ax in zip(pads, axes):
        width[ax] = (p, p)

    def back(g):
        for p, ax in zip(pads, axes):
            g = _reflect_pad_adjoint_axis(g, p, ax)
        return (g,)

    return _make(np.pad(a.data, width, mode="reflect"), (a,), back)


def _conv2d_valid(x, k):
    def back(g):
        gx, gk = backend.conv2d_backward(x.data, k.data, g)
        return gx, gk

    return _make(backend.conv2d_forward(x.data, k.data), (x, k), back)


def conv2d(x, k, padding="reflect"):
    """2D cross-correlation, channels-last: [B,H,W,Ci] * [kh,kw,Ci,Co]."""
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 4 or k.ndim != 4:
        raise ValueError("conv2d expects x[B,H,W,Ci] and k[kh,kw,Ci,Co]")
    kh, kw, ci, _ = k.shape
    if x.shape[3] != ci:
        raise ValueError(f"input channels {x.shape[3]} != kernel channels {ci}")
    if padding == "reflect":
        if kh % 2 == 0 or kw % 2 == 0:
            raise ValueError("reflect padding needs odd kernel sizes")
        x = pad_reflect(x, (kh // 2, kw // 2), (1, 2))
    elif padding == "valid":
        if x.shape[1] < kh or x.shape[2] < kw:
            raise ValueError("kernel larger than input under valid padding")
    else:
        raise ValueError(f"unknown padding {padding!r}")
    return _conv2d_valid(x, k)


def conv3d(x, k, temporal_stride=1):
    """3D cross-correlation: valid along depth (with stride), reflect spatially.

    x is [B,D,H,W,Ci], k is [kd,kh,kw,Ci,Co]; output depth is
    (D-kd)/stride + 1 and the spatial dims are preserved.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.ndim != 5 or k.ndim != 5:
        raise ValueError("conv3d expects x[B,D,H,W,Ci] and k[kd,kh,kw,Ci,Co]")
    kd, kh, kw, ci, _ = k.shape
    if x.shape[4] != ci:
        raise ValueError(f"input channels {x.shape[4]} != kernel channels {ci}")
    if kh % 2 == 0 or kw % 2 == 0:
        raise ValueError("spatial reflect padding needs odd kernel sizes")
    D = x.shape[1]
    if D < kd or (D - kd) % temporal_stride != 0:
        raise ValueError(
            f"depth {D} incompatible with temporal kernel {kd} and stride {temporal_stride}"
        )
    x = pad_reflect(x, (kh // 2, kw // 2), (2, 3))

    def back(g):
        gx, gk = backend.conv3d_backward(xp.data, k.data, g, temporal_stride)
        return gx, gk

    xp = x
    return _make(backend.conv3d_forward(xp.data, k.data, temporal_stride), (xp, k), back)
