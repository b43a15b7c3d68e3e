"""Shift/brightness-corrected loss, corrected PSNR, and SSIM.

The reconstruction is compared to the target after searching over small
integer translations and an additive brightness constant, restricted to
pixels that are clear in the target mask and clear in at least one input
acquisition. The reconstruction is cropped by ``d`` pixels on each side
and the target patch slides over offsets (u, v) in [0, 2d]^2, so every
offset stays inside the image; the best offset wins.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Tensor, as_tensor, mul, sub, tsum
from .imaging import MAX_VALUE

PSNR_CAP = 120.0
CMSE_FLOOR = 1e-12


class UnscorableSampleError(ValueError):
    """No clear pixels at any candidate offset."""


@dataclass
class CorrectedScore:
    value: float              # squared error for the loss, dB for the metric
    best_shift: tuple         # (u, v) offsets into the target, each in [0, 2d]
    brightness: float         # additive constant absorbed before scoring
    clear_pixels: int
    node: Tensor | None = None  # differentiable loss value, when requested


def _offset_search(sr, hr, hr_mask, joint_clear, d):
    """Return (u, v, b, cmse, n_clear) minimizing the corrected MSE."""
    rh, rw = sr.shape
    if hr.shape != (rh, rw):
        raise ValueError("reconstruction and target must share dimensions")
    if 2 * d >= rh or 2 * d >= rw:
        raise ValueError("crop margin too large for the image")
    crop = sr[d:rh - d, d:rw - d]
    jc = np.asarray(joint_clear, dtype=bool)[d:rh - d, d:rw - d]
    hm = np.asarray(hr_mask, dtype=bool)
    ch, cw = crop.shape

    best = None
    for u in range(2 * d + 1):
        for v in range(2 * d + 1):
            patch = hr[u:u + ch, v:v + cw]
            clear = hm[u:u + ch, v:v + cw] & jc
            n = int(clear.sum())
            if n == 0:
                continue
            diff = (patch - crop)[clear]
            b = diff.mean()
            cmse = ((diff - b) ** 2).mean()
            key = (cmse, u, v)
            if best is None or key < best[0]:
                best = (key, (u, v, b, cmse, n))
    if best is None:
        raise UnscorableSampleError("no clear pixels at any offset")
    return best[1]


def corrected_loss(sr, hr, hr_mask, joint_clear, d=3) -> CorrectedScore:
    """Minimum masked squared error over offsets and brightness.

    ``sr`` may be a Tensor, in which case the returned score carries a
    differentiable ``node`` (the discrete argmin is held fixed for the
    backward pass; the brightness constant stays inside the graph).
    """
    sr_t = as_tensor(sr)
    hr = np.asarray(hr, dtype=np.float64)
    u, v, _, _, n = _offset_search(sr_t.data, hr, hr_mask, joint_clear, d)

    rh, rw = sr_t.shape
    crop = sr_t[d:rh - d, d:rw - d]
    ch, cw = crop.shape
    clear = (
        np.asarray(hr_mask, dtype=bool)[u:u + ch, v:v + cw]
        & np.asarray(joint_clear, dtype=bool)[d:rh - d, d:rw - d]
    )
    m = clear.astype(np.float64)
    diff = sub(Tensor(hr[u:u + ch, v:v + cw]), crop)
    b = mul(tsum(mul(diff, m)), 1.0 / n)
    resid = sub(diff, b)
    loss = mul(tsum(mul(mul(resid, resid), m)), 1.0 / n)
    return CorrectedScore(
        value=float(loss.data),
        best_shift=(u, v),
        brightness=float(b.data),
        clear_pixels=n,
        node=loss if sr_t.requires_grad else None,
    )


def mpsnr(sr, hr, hr_mask=None, joint_clear=None, d=3) -> CorrectedScore:
    """Corrected PSNR in dB, capped at 120 when the error underflows."""
    sr = np.asarray(sr, dtype=np.float64)
    hr = np.asarray(hr, dtype=np.float64)
    if hr_mask is None:
        hr_mask = np.ones_like(hr, dtype=bool)
    if joint_clear is None:
        joint_clear = np.ones_like(sr, dtype=bool)
    u, v, b, cmse, n = _offset_search(sr, hr, hr_mask, joint_clear, d)
    if cmse < CMSE_FLOOR:
        value = PSNR_CAP
    else:
        value = min(10.0 * np.log10(MAX_VALUE ** 2 / cmse), PSNR_CAP)
    return CorrectedScore(
        value=float(value), best_shift=(u, v), brightness=float(b), clear_pixels=n
    )


def _gaussian_window(size=11, sigma=1.5):
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def ssim(sr, hr, dynamic_range=float(MAX_VALUE), win_size=11, sigma=1.5) -> float:
    """Mean structural similarity with a Gaussian window."""
    x = np.asarray(sr, dtype=np.float64)
    y = np.asarray(hr, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError("images must share dimensions")
    c1 = (0.01 * dynamic_range) ** 2
    c2 = (0.03 * dynamic_range) ** 2
    win = _gaussian_window(win_size, sigma)

    def filt(im):
        return ndimage.correlate(im, win, mode="reflect")

    ux, uy = filt(x), filt(y)
    vx = filt(x * x) - ux * ux
    vy = filt(y * y) - uy * uy
    vxy = filt(x * y) - ux * uy
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux ** 2 + uy ** 2 + c1) * (vx + vy + c2)
    return float(np.mean(num / den))
