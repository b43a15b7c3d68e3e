"""The fusion network: shared-weight feature extraction, in-network
registration via dynamic filters, mask-driven mutual inpainting, slow 3D
fusion, and a residual head over the averaged registered inputs.

Stacks are channels-last. Image index 0 is always the reference: the
dynamic filter bank aligns items 1..N-1 to it, and item 0 passes through
the registration untouched.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from .autodiff import (
    Tensor,
    add,
    as_tensor,
    concat,
    conv2d,
    conv3d,
    flip,
    instance_norm,
    leaky_relu,
    mul,
    reshape,
    softmax,
    take,
    tmean,
    transpose,
    tsum,
)
from . import configio
from .imaging import shift_mask
from .registration import Shift


@dataclass
class ModelConfig:
    n_images: int = 9
    r: int = 3
    features: int = 64             # channels everywhere except RegNet's first layer
    regnet_first_channels: int = 128
    filter_size: int = 7           # K, odd; corrects shifts up to K//2 pixels
    sisrnet_layers: int = 8
    regnet_2d_layers: int = 3      # shared 2D layers, the last maps to K^2
    regnet_mid_channels: int = 0   # 0 = same as features
    regnet_spatial_kernel: int = 3  # odd; spans shifts up to half its size
    fusion_temporal_kernel: int = 3
    fusion_layers: int = 0         # 0 = derive from n_images
    leaky_slope: float = 0.2
    residual_mean: float = 0.0
    residual_std: float = 1.0
    shift_rounding: str = "centroid"  # mask alignment: "centroid" or "argmax"

    def __post_init__(self):
        if self.filter_size % 2 == 0:
            raise ValueError("dynamic filter size must be odd")
        if self.regnet_mid_channels == 0:
            self.regnet_mid_channels = self.features
        if self.regnet_spatial_kernel % 2 == 0:
            raise ValueError("regnet spatial kernel must be odd")
        tk = self.fusion_temporal_kernel
        if self.fusion_layers == 0:
            if (self.n_images - 1) % (tk - 1):
                raise ValueError("n_images - 1 must be divisible by temporal kernel - 1")
            self.fusion_layers = (self.n_images - 1) // (tk - 1)
        if self.fusion_layers * (tk - 1) != self.n_images - 1:
            raise ValueError("fusion layers must reduce temporal depth exactly to 1")
        if self.shift_rounding not in ("centroid", "argmax"):
            raise ValueError("shift_rounding must be 'centroid' or 'argmax'")

    def to_text(self) -> str:
        return configio.to_text(self)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return configio.from_text(cls, text)


@dataclass
class RegistrationFilterBank:
    """N-1 learned KxK shift filters plus their extracted integer shifts."""

    filters: Tensor               # [N-1, K, K], softmax outputs
    integer_shifts: list = field(default_factory=list)


# -- parameters -------------------------------------------------------


def _uniform_init(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, shape)


def _structured_regnet_init(p, cfg: ModelConfig, rng) -> None:
    """Correlation-structured start for the registration subnetwork.

    Only applies when the first layer's spatial kernel spans the whole
    K x K shift window and the channel counts cover all K^2 classes.
    Channel k of the 3D layer starts as a (reference center tap minus
    moving tap at offset k) difference detector, the middle 2D layers as
    near-identity maps, and the last layer reads each difference channel
    negatively into the matching logit, so class k peaks where the
    difference vanishes. A small random overlay breaks symmetry.
    """
    K = cfg.filter_size
    ks = cfg.regnet_spatial_kernel
    if (ks < K or cfg.regnet_first_channels < K * K
            or (cfg.regnet_2d_layers > 1 and cfg.regnet_mid_channels < K * K)):
        return
    noise = 0.002
    c, cc = K // 2, ks // 2
    w3 = noise * rng.standard_normal(p["reg.conv3d.w"].data.shape)
    for k in range(K * K):
        oy, ox = divmod(k, K)
        w3[0, cc, cc, :, k] += 4.0
        w3[1, oy + cc - c, ox + cc - c, :, k] -= 4.0
    p["reg.conv3d.w"].data = w3
    for i in range(cfg.regnet_2d_layers):
        w = noise * rng.standard_normal(p[f"reg.conv{i}.w"].data.shape)
        n = min(w.shape[2], w.shape[3], K * K)
        gain = -16.0 if i == cfg.regnet_2d_layers - 1 else 1.0
        w[1, 1, :n, :n] += gain * np.eye(n)
        p[f"reg.conv{i}.w"].data = w


def init_model_params(cfg: ModelConfig, seed=0) -> dict:
    """Fan-balanced uniform kernels, zero biases, unit residual statistics.

    Layers followed by instance normalization carry no bias (it would be
    cancelled immediately and never receive gradient). The registration
    subnetwork gets a correlation-structured start when its shape allows
    (see _structured_regnet_init).
    """
    rng = np.random.default_rng(seed)
    F = cfg.features
    K = cfg.filter_size
    p: dict[str, Tensor] = {}

    def conv_w(name, shape):
        fan_in = int(np.prod(shape[:-1]))
        fan_out = int(np.prod(shape[:-2])) * shape[-1]
        p[name] = Tensor(_uniform_init(rng, shape, fan_in, fan_out), requires_grad=True)

    cin = 1
    for i in range(cfg.sisrnet_layers):
        conv_w(f"sisr.conv{i}.w", (3, 3, cin, F))
        cin = F
    conv_w("sisr.proj.w", (3, 3, F, 1))
    p["sisr.proj.b"] = Tensor(np.zeros(1), requires_grad=True)

    ks = cfg.regnet_spatial_kernel
    conv_w("reg.conv3d.w", (2, ks, ks, F, cfg.regnet_first_channels))
    p["reg.conv3d.b"] = Tensor(np.zeros(cfg.regnet_first_channels), requires_grad=True)
    cin = cfg.regnet_first_channels
    for i in range(cfg.regnet_2d_layers):
        cout = K * K if i == cfg.regnet_2d_layers - 1 else cfg.regnet_mid_channels
        conv_w(f"reg.conv{i}.w", (3, 3, cin, cout))
        p[f"reg.conv{i}.b"] = Tensor(np.zeros(cout), requires_grad=True)
        cin = cout

    tk = cfg.fusion_temporal_kernel
    cin = F
    for i in range(cfg.fusion_layers):
        conv_w(f"fus.conv{i}.w", (tk, 3, 3, cin, F))
        cin = F
    conv_w("fus.proj.w", (3, 3, F, 1))
    p["fus.proj.b"] = Tensor(np.zeros(1), requires_grad=True)

    _structured_regnet_init(p, cfg, rng)

    # frozen statistics of the residual heads
    p["res.stats"] = Tensor(np.array([cfg.residual_mean, cfg.residual_std]))
    p["sisr_res.stats"] = Tensor(np.array([0.0, 1.0]))
    return p


def trainable(params: dict, prefix="") -> dict:
    return {
        k: t for k, t in params.items() if t.requires_grad and k.startswith(prefix)
    }


def zero_grads(params: dict) -> None:
    for t in params.values():
        t.grad = None


def params_arrays(params: dict) -> dict:
    return {k: t.data for k, t in params.items()}


def set_params_arrays(params: dict, arrays: dict) -> None:
    for k, arr in arrays.items():
        if k not in params:
            raise KeyError(f"checkpoint parameter {k!r} does not match the model")
        if params[k].data.shape != arr.shape:
            raise ValueError(
                f"shape mismatch for {k!r}: model {params[k].data.shape}, "
                f"checkpoint {arr.shape}"
            )
        params[k].data = arr.copy()


# -- subnetworks ------------------------------------------------------


def sisrnet_forward(ilr_stack, params, cfg: ModelConfig) -> Tensor:
    """Per-image features; identical weights applied to every image."""
    x = as_tensor(ilr_stack)
    if x.ndim == 3:
        x = reshape(x, (*x.shape, 1))
    for i in range(cfg.sisrnet_layers):
        x = conv2d(x, params[f"sisr.conv{i}.w"], padding="reflect")
        x = instance_norm(x)
        x = leaky_relu(x, cfg.leaky_slope)
    return x


def sisr_forward(ilr, params, cfg: ModelConfig) -> Tensor:
    """Single-image reconstruction: feature extractor + projection head,
    residual over the upsampled input."""
    x = as_tensor(ilr)
    squeeze = x.ndim == 2
    if squeeze:
        x = reshape(x, (1, *x.shape, 1))
    z = sisrnet_forward(x, params, cfg)
    r = add(conv2d(z, params["sisr.proj.w"], padding="reflect"), params["sisr.proj.b"])
    stats = params["sisr_res.stats"].data
    out = add(x, add(mul(r, float(stats[1])), float(stats[0])))
    if squeeze:
        out = reshape(out, out.shape[1:3])
    return out


def regnet_forward(features, params, cfg: ModelConfig) -> RegistrationFilterBank:
    """Dynamic filter bank from interleaved (reference, moving) feature pairs."""
    z = as_tensor(features)
    n = z.shape[0]
    K = cfg.filter_size
    idx = np.empty(2 * (n - 1), dtype=np.intp)
    idx[0::2] = 0
    idx[1::2] = np.arange(1, n)
    pairs = take(z, idx, axis=0)                       # [2(N-1), H, W, F]
    pairs = reshape(pairs, (1, *pairs.shape))
    x = conv3d(pairs, params["reg.conv3d.w"], temporal_stride=2)
    x = leaky_relu(add(x, params["reg.conv3d.b"]), cfg.leaky_slope)
    x = reshape(x, x.shape[1:])                        # [N-1, H, W, C1]
    for i in range(cfg.regnet_2d_layers):
        x = add(conv2d(x, params[f"reg.conv{i}.w"], padding="reflect"),
                params[f"reg.conv{i}.b"])
        if i < cfg.regnet_2d_layers - 1:
            x = leaky_relu(x, cfg.leaky_slope)
    logits = tmean(x, axes=(1, 2))                     # [N-1, K^2]
    filt = reshape(softmax(logits, axis=1), (n - 1, K, K))
    shifts = [extract_shift(f, rounding=cfg.shift_rounding) for f in filt.data]
    return RegistrationFilterBank(filters=filt, integer_shifts=shifts)


def _round_toward_zero(v):
    r = np.trunc(v)
    frac = v - r
    if abs(frac) > 0.5:
        r += np.sign(frac)
    return int(r)


def extract_shift(filt, rounding="centroid") -> Shift:
    """Integer shift nearest to the subpixel shift a filter applies.

    The subpixel shift is the centroid of the filter mass relative to its
    center (or its argmax position); rounding breaks ties toward zero.
    """
    filt = np.asarray(filt, dtype=np.float64)
    K = filt.shape[0]
    c = K // 2
    if rounding == "argmax":
        iy, ix = np.unravel_index(np.argmax(filt), filt.shape)
        return Shift(int(iy) - c, int(ix) - c)
    total = filt.sum()
    ys, xs = np.mgrid[0:K, 0:K]
    dy = float(((ys - c) * filt).sum() / total)
    dx = float(((xs - c) * filt).sum() / total)
    return Shift(_round_toward_zero(dy), _round_toward_zero(dx))


def delta_filter_bank(shifts, K) -> RegistrationFilterBank:
    """Fixed delta filters encoding given integer shifts.

    Substituting this for the learned bank turns the registration stage
    into plain integer shifting (the registration-free ablation).
    """
    c = K // 2
    filts = np.zeros((len(shifts), K, K))
    for i, s in enumerate(shifts):
        if abs(s.dy) > c or abs(s.dx) > c:
            raise ValueError(f"shift {s} exceeds the filter radius {c}")
        filts[i, c + s.dy, c + s.dx] = 1.0
    return RegistrationFilterBank(
        filters=Tensor(filts),
        integer_shifts=[Shift(s.dy, s.dx) for s in shifts],
    )


def gdc_apply(stack, bank: RegistrationFilterBank) -> Tensor:
    """Convolve items 1..N-1 spatially with their dynamic filter (shared
    across channels, reflect padded); item 0 is the untouched reference.

    A delta filter at offset (p, q) from the center translates content by
    exactly (p, q) in the interior, matching integer shift application.
    """
    x = as_tensor(stack)
    n = x.shape[0]
    K = bank.filters.shape[1]
    if bank.filters.shape[0] != n - 1:
        raise ValueError("filter bank size does not match the stack")
    out = [x[0:1]]
    for i in range(1, n):
        # cross-correlation with the flipped filter == true convolution,
        # which gives delta filters translation (not reversal) semantics
        k = reshape(flip(bank.filters[i - 1], (0, 1)), (K, K, 1, 1))
        xi = transpose(x[i:i + 1], (3, 1, 2, 0))       # [C, H, W, 1]
        yi = conv2d(xi, k, padding="reflect")
        out.append(transpose(yi, (3, 1, 2, 0)))
    return concat(out, axis=0)


def align_masks(masks, bank: RegistrationFilterBank):
    """Shift reliability masks by each filter's integer shift (reference fixed)."""
    masks = np.asarray(masks, dtype=bool)
    out = [masks[0]]
    for i, s in enumerate(bank.integer_shifts, start=1):
        out.append(shift_mask(masks[i], s.dy, s.dx))
    return np.stack(out)


def mutual_inpaint(stack, aligned_masks) -> Tensor:
    """Replace unreliable values with the mean over images reliable there.

    Where no image is reliable, values stay unchanged. Reliable pixels
    are never altered. Gradients flow into donor images.
    """
    x = as_tensor(stack)
    m = np.asarray(aligned_masks, dtype=np.float64)
    if m.ndim == x.ndim - 1:
        m = m[..., None]
    count = m.sum(axis=0, keepdims=True)
    has_donor = (count > 0).astype(np.float64)
    donor = mul(tsum(mul(x, m), axes=0, keepdims=True), 1.0 / np.maximum(count, 1.0))
    fill = add(mul(donor, has_donor), mul(x, 1.0 - has_donor))
    return add(mul(x, m), mul(fill, 1.0 - m))


def fusionnet_forward(features, params, cfg: ModelConfig) -> Tensor:
    """Slow temporal fusion down to depth 1, then linear projection to one
    channel. Output is [1, H, W, 1] with the input spatial dims."""
    z = as_tensor(features)
    x = reshape(z, (1, *z.shape))
    for i in range(cfg.fusion_layers):
        x = conv3d(x, params[f"fus.conv{i}.w"], temporal_stride=1)
        x = instance_norm(x)
        x = leaky_relu(x, cfg.leaky_slope)
    if x.shape[1] != 1:
        raise ValueError("temporal depth did not reduce to 1; check config")
    x = reshape(x, (1, x.shape[2], x.shape[3], x.shape[4]))
    return add(conv2d(x, params["fus.proj.w"], padding="reflect"), params["fus.proj.b"])


def deepsum_forward(ilr_stack, masks, params, cfg: ModelConfig, bank=None):
    """Full forward pass: returns (sr [H, W] tensor, filter bank).

    The reconstruction is the mean of the registered, inpainted inputs
    plus the denormalized learned residual. Passing ``bank`` bypasses the
    registration subnetwork and applies the given filters instead.
    """
    x = as_tensor(ilr_stack)
    if x.ndim == 3:
        x = reshape(x, (*x.shape, 1))
    z = sisrnet_forward(x, params, cfg)
    if bank is None:
        bank = regnet_forward(z, params, cfg)
    amasks = align_masks(masks, bank)

    zr = mutual_inpaint(gdc_apply(z, bank), amasks)
    res = fusionnet_forward(zr, params, cfg)           # [1, H, W, 1]

    xr = mutual_inpaint(gdc_apply(x, bank), amasks)
    avg = tmean(xr, axes=0)                            # [H, W, 1]

    stats = params["res.stats"].data
    sr = add(avg, reshape(add(mul(res, float(stats[1])), float(stats[0])),
                          (x.shape[1], x.shape[2], 1)))
    return reshape(sr, (x.shape[1], x.shape[2])), bank
