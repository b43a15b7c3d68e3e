"""Image and mask primitives: 16-bit I/O, clipping, bicubic upsampling.

Images travel through the pipeline as float64 arrays holding raw sensor
counts in [0, 2^16-1]; files store them as 16-bit grayscale PNG. Masks
are boolean arrays (True = reliable pixel), stored as 8-bit 0/255 PNG.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from PIL import Image as PILImage

MAX_VALUE = 2 ** 16 - 1
LR_CLIP = 2 ** 14 - 1


@dataclass
class Image:
    """A single-band image in raw counts."""

    pixels: np.ndarray
    band: str = "synthetic"

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError("Image expects a 2D pixel array")

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass
class Mask:
    """Per-pixel reliability flags (True = clear/usable)."""

    bits: np.ndarray = field()

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise ValueError("Mask expects a 2D boolean array")


def clip_lr(img: np.ndarray) -> np.ndarray:
    """Clamp low-resolution counts to the 14-bit ceiling. Idempotent."""
    return np.minimum(np.asarray(img, dtype=np.float64), float(LR_CLIP))


def _cubic_weight(s, a=-0.5):
    s = np.abs(s)
    return np.where(
        s <= 1.0,
        ((a + 2.0) * s - (a + 3.0)) * s * s + 1.0,
        np.where(s < 2.0, a * (((s - 5.0) * s + 8.0) * s - 4.0), 0.0),
    )


def _cubic_axis(img, r, axis):
    n = img.shape[axis]
    x = (np.arange(n * r) + 0.5) / r - 0.5
    i0 = np.floor(x).astype(np.intp)
    t = x - i0
    offsets = np.array([-1, 0, 1, 2])
    idx = np.clip(i0[:, None] + offsets[None, :], 0, n - 1)  # edge replication
    w = _cubic_weight(t[:, None] - offsets[None, :])
    w = w / w.sum(axis=1, keepdims=True)  # exact partition of unity
    moved = np.moveaxis(img, axis, 0)
    out = np.einsum("ik,ik...->i...", w, moved[idx])
    return np.moveaxis(out, 0, axis)


def bicubic_upsample(img: np.ndarray, r: int) -> np.ndarray:
    """Catmull-Rom (a = -0.5) bicubic upsampling by an integer factor.

    Borders use edge replication; r = 1 is the identity.
    """
    if r < 1:
        raise ValueError("upsampling factor must be >= 1")
    img = np.asarray(img, dtype=np.float64)
    if r == 1:
        return img.copy()
    return _cubic_axis(_cubic_axis(img, r, 0), r, 1)


def upsample_mask(mask: np.ndarray, r: int) -> np.ndarray:
    """Nearest-neighbour mask upsampling (each LR pixel becomes an r x r block)."""
    if r < 1:
        raise ValueError("upsampling factor must be >= 1")
    mask = np.asarray(mask, dtype=bool)
    return np.repeat(np.repeat(mask, r, axis=0), r, axis=1)


def shift_mask(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate a mask; pixels shifted in from outside become unreliable."""
    mask = np.asarray(mask, dtype=bool)
    out = np.zeros_like(mask)
    h, w = mask.shape
    ys = slice(max(dy, 0), min(h + dy, h))
    xs = slice(max(dx, 0), min(w + dx, w))
    yv = slice(max(-dy, 0), min(h - dy, h))
    xv = slice(max(-dx, 0), min(w - dx, w))
    out[ys, xs] = mask[yv, xv]
    return out


def save_image16(path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img, dtype=np.float64)), 0, MAX_VALUE)
    PILImage.fromarray(arr.astype("<u2")).save(path)


def load_image16(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im, dtype=np.float64)


def save_mask(path, mask: np.ndarray) -> None:
    arr = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    PILImage.fromarray(arr, mode="L").save(path)


def load_mask(path) -> np.ndarray:
    with PILImage.open(path) as im:
        return np.asarray(im) > 127
