"""Classical integer-shift estimation and shift application.

Shifts are exhaustive-search maxima of normalized cross-correlation over
mutually reliable pixels; the search window is tiny so brute force is
both exact and deterministic. Positive dy/dx mean down/right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class InsufficientOverlapError(ValueError):
    """Raised when too few mutually reliable pixels support an estimate."""


MIN_OVERLAP = 64


@dataclass(frozen=True)
class Shift:
    dy: int
    dx: int

    def __neg__(self):
        return Shift(-self.dy, -self.dx)

    def as_tuple(self):
        return (self.dy, self.dx)


def apply_shift(img: np.ndarray, s: Shift) -> np.ndarray:
    """Translate by integer (dy, dx); vacated pixels take edge-replicated values."""
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    ys = np.clip(np.arange(h) - s.dy, 0, h - 1)
    xs = np.clip(np.arange(w) - s.dx, 0, w - 1)
    return img[np.ix_(ys, xs)]


def estimate_shift(reference, moving, bound=3, masks=None) -> Shift:
    """Integer shift of ``moving`` relative to ``reference``.

    Returns the (dy, dx) within +/-bound maximizing the normalized
    cross-correlation over mutually reliable pixels (each image mean-
    subtracted over that overlap). Ties break toward the smallest
    |dy|+|dx|, then smallest dy, then smallest dx, so results are
    reproducible.
    """
    reference = np.asarray(reference, dtype=np.float64)
    moving = np.asarray(moving, dtype=np.float64)
    if reference.shape != moving.shape:
        raise ValueError("reference and moving must have equal dimensions")
    if bound < 0:
        raise ValueError("bound must be >= 0")
    h, w = reference.shape
    if masks is None:
        mref = np.ones((h, w), dtype=bool)
        mmov = mref
    else:
        mref = np.asarray(masks[0], dtype=bool)
        mmov = np.asarray(masks[1], dtype=bool)

    best = None
    usable = False
    for dy in range(-bound, bound + 1):
        for dx in range(-bound, bound + 1):
            # moving ~ reference shifted by (dy, dx): compare
            # reference[y, x] with moving[y + dy, x + dx]
            ry = slice(max(-dy, 0), min(h - dy, h))
            rx = slice(max(-dx, 0), min(w - dx, w))
            my = slice(max(dy, 0), min(h + dy, h))
            mx = slice(max(dx, 0), min(w + dx, w))
            a = reference[ry, rx]
            b = moving[my, mx]
            m = mref[ry, rx] & mmov[my, mx]
            n = int(m.sum())
            if n < MIN_OVERLAP:
                continue
            usable = True
            av = a[m] - a[m].mean()
            bv = b[m] - b[m].mean()
            denom = np.sqrt((av * av).sum() * (bv * bv).sum())
            score = (av * bv).sum() / denom if denom > 0 else 0.0
            key = (-score, abs(dy) + abs(dx), dy, dx)
            if best is None or key < best[0]:
                best = (key, Shift(dy, dx))
    if not usable:
        raise InsufficientOverlapError(
            f"fewer than {MIN_OVERLAP} mutually reliable pixels at every offset"
        )
    return best[1]
