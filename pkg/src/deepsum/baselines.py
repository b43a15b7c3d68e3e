"""Classical and learned comparison methods: bicubic interpolation with
and without averaging, iterative back-projection, bilateral total
variation, and single-image reconstruction with and without averaging.

All methods share the same data preparation: bicubic upsampling,
clearest-first ordering, and classical registration to the reference.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .autodiff import Tensor
from .datagen import PreparedStack, Scene, prepare_ilr_stack
from .imaging import bicubic_upsample, shift_mask
from .model import ModelConfig, sisr_forward
from .registration import Shift, apply_shift, estimate_shift


@dataclass
class ForwardModel:
    """HR -> LR imaging model: shift, blur, decimate."""

    blur_kernel: np.ndarray      # 2D, normalized
    r: int
    shifts: list                 # per-image HR-grid Shift

    def __post_init__(self):
        self.blur_kernel = np.asarray(self.blur_kernel, dtype=np.float64)
        if abs(self.blur_kernel.sum() - 1.0) > 1e-12:
            raise ValueError("blur kernel must sum to 1")
        if self.r < 1:
            raise ValueError("decimation factor must be >= 1")

    def simulate(self, sr, i):
        """LR image i predicted from the current reconstruction."""
        moved = apply_shift(sr, self.shifts[i])
        blurred = ndimage.convolve(moved, self.blur_kernel, mode="nearest")
        off = self.r // 2
        return blurred[off::self.r, off::self.r]

    def back_project(self, err_lr, i, hr_shape):
        """Adjoint-style path for an LR-domain error: upsample, transpose
        blur, undo the shift. Scaled by r^2 so the step size stays O(1)."""
        off = self.r // 2
        up = np.zeros(hr_shape)
        up[off::self.r, off::self.r] = err_lr * (self.r ** 2)
        spread = ndimage.convolve(up, self.blur_kernel[::-1, ::-1], mode="nearest")
        return apply_shift(spread, -self.shifts[i])


def gaussian_kernel(sigma, truncate=4.0):
    """2D separable Gaussian, matching scipy's default truncation."""
    radius = int(truncate * sigma + 0.5)
    ax = np.arange(-radius, radius + 1)
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    g /= g.sum()
    return np.outer(g, g)


def forward_model_for_scene(prep: PreparedStack, blur_sigma=1.0, r=3) -> ForwardModel:
    """Surrogate imaging model: Gaussian blur plus the classically
    estimated per-image shifts."""
    return ForwardModel(gaussian_kernel(blur_sigma), r, list(prep.shifts))


def masked_mean(stack, masks):
    """Per-pixel mean over reliable images; plain mean where none is reliable."""
    stack = np.asarray(stack, dtype=np.float64)
    m = np.asarray(masks, dtype=np.float64)
    count = m.sum(axis=0)
    total = (stack * m).sum(axis=0)
    plain = stack.mean(axis=0)
    return np.where(count > 0, total / np.maximum(count, 1.0), plain)


def bicubic(scene: Scene, r=3, prep=None):
    """Bicubic upsampling of the clearest acquisition."""
    if prep is None:
        prep = prepare_ilr_stack(scene, r=r)
    return bicubic_upsample(scene.lr_images[prep.order[0]], r)


def bicubic_mean(scene: Scene, r=3, prep=None):
    """Masked average of the upsampled, registered acquisitions."""
    if prep is None:
        prep = prepare_ilr_stack(scene, r=r)
    return masked_mean(prep.ilr, prep.masks)


def _data_mse(sr, fm, lr_images, lr_masks):
    total = 0.0
    n = 0
    for i, (y, m) in enumerate(zip(lr_images, lr_masks)):
        e = (fm.simulate(sr, i) - y)[m]
        total += float((e * e).sum())
        n += e.size
    return total / max(n, 1)


def ibp(scene: Scene, fm: ForwardModel, init=None, iters=30, step=1.0, r=3, prep=None):
    """Iterative back-projection of simulated-vs-actual LR residuals.

    Stops early and returns the best iterate if the data-fidelity MSE
    worsens three times in a row.
    """
    if prep is None:
        prep = prepare_ilr_stack(scene, r=r)
    lr_images = [scene.lr_images[i] for i in prep.order]
    lr_masks = [scene.lr_masks[i] for i in prep.order]
    sr = bicubic_mean(scene, r=r, prep=prep) if init is None else init.copy()

    best = sr.copy()
    best_mse = _data_mse(sr, fm, lr_images, lr_masks)
    worse = 0
    for _ in range(iters):
        update = np.zeros_like(sr)
        for i, (y, m) in enumerate(zip(lr_images, lr_masks)):
            e = (y - fm.simulate(sr, i)) * m
            update += fm.back_project(e, i, sr.shape)
        sr = sr + step * update / len(lr_images)
        mse = _data_mse(sr, fm, lr_images, lr_masks)
        if mse >= best_mse:
            worse += 1
            if worse >= 3:
                return best
        else:
            worse = 0
            best = sr.copy()
            best_mse = mse
    return best


def btv_regularizer(x, radius=2, alpha=0.6):
    """Bilateral total variation penalty value (zero for constants)."""
    total = 0.0
    for dl in range(-radius, radius + 1):
        for dm in range(-radius, radius + 1):
            if dl == 0 and dm == 0:
                continue
            d = x - apply_shift(x, Shift(dl, dm))
            total += alpha ** (abs(dl) + abs(dm)) * np.abs(d).sum()
    return total


def btv(
    scene: Scene,
    fm: ForwardModel,
    init=None,
    iters=50,
    step=2.0,
    reg_weight=0.01,
    radius=2,
    alpha=0.6,
    r=3,
    prep=None,
):
    """Subgradient descent on L1 data fidelity plus the bilateral TV prior."""
    if prep is None:
        prep = prepare_ilr_stack(scene, r=r)
    lr_images = [scene.lr_images[i] for i in prep.order]
    lr_masks = [scene.lr_masks[i] for i in prep.order]
    x = bicubic_mean(scene, r=r, prep=prep) if init is None else init.copy()

    def l1_cost(z):
        c = sum(
            np.abs((fm.simulate(z, i) - y)[m]).sum()
            for i, (y, m) in enumerate(zip(lr_images, lr_masks))
        )
        return c + reg_weight * btv_regularizer(z, radius, alpha)

    best = x.copy()
    best_cost = l1_cost(x)
    worse = 0
    for _ in range(iters):
        g = np.zeros_like(x)
        for i, (y, m) in enumerate(zip(lr_images, lr_masks)):
            s = np.sign(fm.simulate(x, i) - y) * m
            g += fm.back_project(s, i, x.shape)
        g /= len(lr_images)
        for dl in range(-radius, radius + 1):
            for dm in range(-radius, radius + 1):
                if dl == 0 and dm == 0:
                    continue
                s = np.sign(x - apply_shift(x, Shift(dl, dm)))
                g += reg_weight * alpha ** (abs(dl) + abs(dm)) * (
                    s - apply_shift(s, Shift(-dl, -dm))
                )
        x = x - step * g
        cost = l1_cost(x)
        if cost >= best_cost:
            worse += 1
            if worse >= 3:
                return best
        else:
            worse = 0
            best = x.copy()
            best_cost = cost
    return best


def sisr(scene: Scene, params, cfg: ModelConfig, r=3, prep=None):
    """Single-image reconstruction of the clearest acquisition."""
    if prep is None:
        prep = prepare_ilr_stack(scene, r=r)
    return sisr_forward(Tensor(prep.ilr[0]), params, cfg).data


def sisr_and_mean(scene: Scene, params, cfg: ModelConfig, n_images=9, r=3, prep=None):
    """Reconstruct the n clearest acquisitions independently with the
    pretrained single-image network, re-register the outputs, and take
    the masked average. The network itself is untouched."""
    if prep is None:
        prep = prepare_ilr_stack(scene, r=r)
    n = min(n_images, prep.ilr.shape[0])
    outs = [sisr_forward(Tensor(prep.ilr[i]), params, cfg).data for i in range(n)]
    masks = [prep.masks[i] for i in range(n)]
    for i in range(1, n):
        s = estimate_shift(outs[0], outs[i], bound=3, masks=(masks[0], masks[i]))
        if s.as_tuple() != (0, 0):
            outs[i] = apply_shift(outs[i], -s)
            masks[i] = shift_mask(masks[i], -s.dy, -s.dx)
    return masked_mean(np.stack(outs), np.stack(masks))
