"""Synthetic scene generation, scene I/O, and training patch extraction.

A scene is one reconstruction task: N low-resolution acquisitions with
reliability masks, plus (for training) the high-resolution target. The
synthetic generator produces scenes through an explicit forward model --
subpixel translation, Gaussian blur, decimation, noise, per-image
brightness offsets and elliptical cloud stamps -- and records the true
shifts and offsets so downstream estimators can be checked exactly.

On disk a scene directory follows the challenge convention:
LR000.png..., QM000.png..., HR.png, SM.png (16-bit grayscale images,
8-bit masks), plus truth.txt for synthetic scenes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .imaging import (
    LR_CLIP,
    bicubic_upsample,
    clip_lr,
    load_image16,
    load_mask,
    save_image16,
    save_mask,
    shift_mask,
    upsample_mask,
)
from .registration import InsufficientOverlapError, Shift, apply_shift, estimate_shift


@dataclass
class Scene:
    """N low-res images + masks, optional high-res target, optional truth."""

    lr_images: list
    lr_masks: list
    hr: np.ndarray | None = None
    hr_mask: np.ndarray | None = None
    band: str = "synthetic"
    scene_id: str = ""
    true_shifts: list | None = None   # (dy, dx) in LR pixels, per image
    true_offsets: list | None = None  # additive brightness, per image

    def __post_init__(self):
        if len(self.lr_images) != len(self.lr_masks):
            raise ValueError("each LR image needs exactly one mask")
        shapes = {im.shape for im in self.lr_images}
        if len(shapes) > 1:
            raise ValueError("all LR images must share one size")

    @property
    def n_images(self):
        return len(self.lr_images)


@dataclass
class DegradationConfig:
    """Forward model parameters for the synthetic generator."""

    r: int = 3
    blur_sigma: float = 1.0          # HR-grid pixels
    max_subpixel_shift: float = 1.0  # LR pixels
    brightness_jitter: float = 300.0
    noise_sigma: float = 50.0
    cloud_coverage: float = 0.1
    n_images: int = 9
    seed: int = 0

    def __post_init__(self):
        if self.r < 1:
            raise ValueError("decimation factor must be >= 1")
        if not 0.0 <= self.cloud_coverage < 1.0:
            raise ValueError("cloud coverage must be in [0, 1)")


@dataclass
class PatchPolicy:
    """Acceptance rules for training patches (sizes on the HR grid)."""

    patch_hr: int = 96
    patches_per_scene: int = 100
    min_clear_lr: float = 0.70
    min_clear_hr: float = 0.85
    min_images: int = 9

    def __post_init__(self):
        if not (0.0 < self.min_clear_lr <= 1.0 and 0.0 < self.min_clear_hr <= 1.0):
            raise ValueError("clarity thresholds must be in (0, 1]")


@dataclass
class TrainingSample:
    """One registered, upsampled input stack with its target patch."""

    ilr: np.ndarray       # [N, p, p] registered bicubic-upsampled inputs
    masks: np.ndarray     # [N, p, p] bool, aligned with ilr
    hr: np.ndarray        # [p, p]
    hr_mask: np.ndarray   # [p, p] bool

    @property
    def joint_clear(self):
        return np.any(self.masks, axis=0)


def make_hr_source(size, rng, low=1500.0, high=11000.0):
    """Random textured target image: multi-scale filtered noise plus edges."""
    coarse = ndimage.gaussian_filter(rng.normal(size=(size, size)), size / 12.0)
    mid = ndimage.gaussian_filter(rng.normal(size=(size, size)), 2.0)
    fine = ndimage.gaussian_filter(rng.normal(size=(size, size)), 0.8)
    img = 3.0 * coarse + 1.5 * mid + fine
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(3):
        theta = rng.uniform(0, np.pi)
        c = rng.uniform(0.25, 0.75) * size * (np.cos(theta) + np.sin(theta))
        step = (np.cos(theta) * xx + np.sin(theta) * yy > c).astype(float)
        img += rng.uniform(-2.0, 2.0) * step
    lo, hi = img.min(), img.max()
    return low + (img - lo) * (high - low) / (hi - lo)


def _translate_subpixel(img, dy, dx):
    """Shift content down/right by fractional (dy, dx), edge-replicated."""
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return ndimage.map_coordinates(img, [yy - dy, xx - dx], order=1, mode="nearest")


def _stamp_clouds(img, mask, coverage, rng):
    h, w = img.shape
    target = coverage * h * w
    tries = 0
    while (~mask).sum() < target and tries < 40:
        cy, cx = rng.uniform(0, h), rng.uniform(0, w)
        ay, ax = rng.uniform(h / 10, h / 3), rng.uniform(w / 10, w / 3)
        yy, xx = np.mgrid[0:h, 0:w]
        blob = ((yy - cy) / ay) ** 2 + ((xx - cx) / ax) ** 2 <= 1.0
        img[blob] = rng.uniform(0.92, 1.0) * LR_CLIP
        mask[blob] = False
        tries += 1
    return img, mask


def synthesize_scene(hr_source, cfg: DegradationConfig, scene_id="synthetic") -> Scene:
    """Run the forward model to produce one scene with recorded ground truth.

    Image 0 gets zero shift and zero brightness offset so the reference
    stays aligned with the target.
    """
    hr_source = np.asarray(hr_source, dtype=np.float64)
    h, w = hr_source.shape
    if h % cfg.r or w % cfg.r:
        raise ValueError("high-res dimensions must be divisible by r")
    rng = np.random.default_rng(cfg.seed)
    off = cfg.r // 2  # sample block centers so the LR grid stays centered

    lr_images, lr_masks, shifts, offsets = [], [], [], []
    for i in range(cfg.n_images):
        if i == 0:
            sy = sx = 0.0
            boff = 0.0
        else:
            sy, sx = rng.uniform(-cfg.max_subpixel_shift, cfg.max_subpixel_shift, 2)
            boff = rng.uniform(-cfg.brightness_jitter, cfg.brightness_jitter)
        moved = _translate_subpixel(hr_source, cfg.r * sy, cfg.r * sx)
        blurred = ndimage.gaussian_filter(moved, cfg.blur_sigma, mode="nearest")
        lr = blurred[off::cfg.r, off::cfg.r].copy()
        if cfg.noise_sigma > 0:
            lr += rng.normal(0.0, cfg.noise_sigma, lr.shape)
        lr += boff
        mask = np.ones(lr.shape, dtype=bool)
        if cfg.cloud_coverage > 0:
            lr, mask = _stamp_clouds(lr, mask, cfg.cloud_coverage, rng)
        lr_images.append(clip_lr(np.clip(lr, 0.0, None)))
        lr_masks.append(mask)
        shifts.append((sy, sx))
        offsets.append(boff)

    return Scene(
        lr_images=lr_images,
        lr_masks=lr_masks,
        hr=hr_source.copy(),
        hr_mask=np.ones_like(hr_source, dtype=bool),
        scene_id=scene_id,
        true_shifts=shifts,
        true_offsets=offsets,
    )


# -- scene I/O --------------------------------------------------------


def write_scene(scene: Scene, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i, (lr, qm) in enumerate(zip(scene.lr_images, scene.lr_masks)):
        save_image16(out_dir / f"LR{i:03d}.png", lr)
        save_mask(out_dir / f"QM{i:03d}.png", qm)
    if scene.hr is not None:
        save_image16(out_dir / "HR.png", scene.hr)
        save_mask(out_dir / "SM.png", scene.hr_mask)
    if scene.true_shifts is not None:
        with open(out_dir / "truth.txt", "w") as f:
            f.write("# index shift_dy_lr shift_dx_lr brightness_offset\n")
            for i, ((sy, sx), b) in enumerate(zip(scene.true_shifts, scene.true_offsets)):
                f.write(f"{i} {sy:.8f} {sx:.8f} {b:.8f}\n")


def load_scene(scene_dir, band="synthetic", min_images=9) -> Scene:
    scene_dir = Path(scene_dir)
    lr_paths = sorted(scene_dir.glob("LR[0-9][0-9][0-9].png"))
    if len(lr_paths) < min_images:
        raise ValueError(
            f"{scene_dir}: found {len(lr_paths)} LR images, need at least {min_images}"
        )
    lr_images, lr_masks = [], []
    for p in lr_paths:
        qm = scene_dir / ("QM" + p.name[2:])
        lr_images.append(clip_lr(load_image16(p)))
        lr_masks.append(load_mask(qm) if qm.exists() else np.ones_like(lr_images[-1], bool))
    hr = hr_mask = None
    if (scene_dir / "HR.png").exists():
        hr = load_image16(scene_dir / "HR.png")
        sm = scene_dir / "SM.png"
        hr_mask = load_mask(sm) if sm.exists() else np.ones_like(hr, dtype=bool)
    shifts = offsets = None
    truth = scene_dir / "truth.txt"
    if truth.exists():
        shifts, offsets = [], []
        for line in truth.read_text().splitlines():
            if not line or line.startswith("#"):
                continue
            _, sy, sx, b = line.split()
            shifts.append((float(sy), float(sx)))
            offsets.append(float(b))
    return Scene(
        lr_images=lr_images,
        lr_masks=lr_masks,
        hr=hr,
        hr_mask=hr_mask,
        band=band,
        scene_id=scene_dir.name,
        true_shifts=shifts,
        true_offsets=offsets,
    )


def load_manifest(path):
    """Read a scene manifest: one scene directory per line, relative to it."""
    path = Path(path)
    dirs = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            dirs.append((path.parent / line).resolve())
    return dirs


def discover_scenes(root):
    root = Path(root)
    return sorted(d for d in root.iterdir() if d.is_dir() and list(d.glob("LR000.png")))


# -- registration-based data preparation ------------------------------


def clarity_order(masks):
    """Indices sorted by increasing number of masked pixels (clearest first)."""
    counts = [int((~m).sum()) for m in masks]
    return sorted(range(len(masks)), key=lambda i: (counts[i], i))


@dataclass
class PreparedStack:
    """Clearest-first, upsampled, classically registered input stack."""

    ilr: np.ndarray     # [M, rH, rW], image 0 is the reference
    masks: np.ndarray   # [M, rH, rW] bool, shifted along with their images
    order: list         # original scene indices, clearest first
    shifts: list        # estimated HR-grid shift of each image pre-alignment


def prepare_ilr_stack(scene: Scene, r=3, bound=3) -> PreparedStack:
    """Bicubic-upsample, reorder clearest-first, and register all images."""
    order = clarity_order(scene.lr_masks)
    ilr = [bicubic_upsample(scene.lr_images[i], r) for i in order]
    masks = [upsample_mask(scene.lr_masks[i], r) for i in order]
    shifts = [Shift(0, 0)]
    for j in range(1, len(ilr)):
        try:
            s = estimate_shift(ilr[0], ilr[j], bound=bound, masks=(masks[0], masks[j]))
        except InsufficientOverlapError:
            s = Shift(0, 0)
        shifts.append(s)
        if s.as_tuple() != (0, 0):
            ilr[j] = apply_shift(ilr[j], -s)
            masks[j] = shift_mask(masks[j], -s.dy, -s.dx)
    return PreparedStack(np.stack(ilr), np.stack(masks), order, shifts)


def extract_patches(scene: Scene, policy: PatchPolicy, rng, r=3):
    """Random accepted training patches from one scene (clearest 9 kept)."""
    if scene.hr is None:
        raise ValueError("patch extraction needs a scene with an HR target")
    p = policy.patch_hr
    prep = prepare_ilr_stack(scene, r=r)
    ilr, masks = prep.ilr, prep.masks
    hr, hr_mask = scene.hr, scene.hr_mask
    H, W = hr.shape
    if p > H or p > W:
        raise ValueError("patch size exceeds the HR image")

    samples = []
    for _ in range(policy.patches_per_scene):
        y = int(rng.integers(0, H - p + 1))
        x = int(rng.integers(0, W - p + 1))
        hr_patch_mask = hr_mask[y:y + p, x:x + p]
        if hr_patch_mask.mean() < policy.min_clear_hr:
            continue
        clar = masks[:, y:y + p, x:x + p].mean(axis=(1, 2))
        ok = np.flatnonzero(clar >= policy.min_clear_lr)
        if len(ok) < policy.min_images:
            continue
        keep = ok[np.argsort(-clar[ok], kind="stable")][:policy.min_images]
        samples.append(
            TrainingSample(
                ilr=ilr[keep, y:y + p, x:x + p].copy(),
                masks=masks[keep, y:y + p, x:x + p].copy(),
                hr=hr[y:y + p, x:x + p].copy(),
                hr_mask=hr_patch_mask.copy(),
            )
        )
    return samples
