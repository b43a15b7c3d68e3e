"""Three-stage training protocol and sliding-window inference.

Stage 1 pretrains the feature extractor as a single-image problem with a
projection head. Stage 2 freezes it, generates feature maps, and trains
the registration subnetwork as shift classification over all K^2 integer
shift classes. Stage 3 trains everything jointly with the corrected
loss, keeping the best checkpoint by validation score.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import configio
from .autodiff import Tensor, log as tlog, neg, reshape, tmean
from .datagen import TrainingSample, prepare_ilr_stack
from .metrics import UnscorableSampleError, corrected_loss, mpsnr
from .model import (
    ModelConfig,
    deepsum_forward,
    init_model_params,
    params_arrays,
    set_params_arrays,
    sisr_forward,
    sisrnet_forward,
    trainable,
    zero_grads,
)
from .optim import AdamState, adam_step

STAGES = ("sisr_pretrain", "regnet_pretrain", "end_to_end")


@dataclass
class TrainConfig:
    stage: str = "end_to_end"
    epochs: int = 50
    batch_size: int = 8
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lr: float = 5e-6
    d: int = 3
    seed: int = 0
    val_every: int = 5
    patience: int = 10  # consecutive worse validations before stopping
    restart_every: int = 0  # warm-restart period for the joint stage; 0 = never

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch size must be positive")
        if self.restart_every < 0:
            raise ValueError("restart period must be >= 0")

    def make_adam(self):
        return AdamState(
            beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps, lr=self.lr
        )

    def to_text(self):
        return configio.to_text(self)

    @classmethod
    def from_text(cls, text):
        return configio.from_text(cls, text)


@dataclass
class SlidingConfig:
    window: int = 9
    num_estimates: int = 5

    def __post_init__(self):
        if self.num_estimates < 1:
            raise ValueError("need at least one estimate")


class TrainLog:
    """Line-oriented training log, optionally mirrored to a file."""

    def __init__(self, path=None, echo=False):
        self.path = path
        self.echo = echo
        self.records = []

    def write(self, **kv):
        line = " ".join(f"{k}={v}" for k, v in kv.items())
        self.records.append(kv)
        if self.echo:
            print(line, flush=True)
        if self.path is not None:
            with open(self.path, "a") as f:
                f.write(line + "\n")


def _batches(n, batch_size, rng):
    idx = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield idx[i:i + batch_size]


def _apply_batch_grads(params, prefix, batch_len, adam):
    tr = trainable(params, prefix)
    grads = {}
    for k, t in tr.items():
        if t.grad is not None:
            grads[k] = t.grad / batch_len
    if grads:
        adam_step({k: params[k].data for k in grads}, grads, adam)
    zero_grads(params)


# -- stage 1: single-image pretraining --------------------------------


def sisr_training_pairs(samples):
    """Split multi-image samples into single-image (ilr, mask, hr, hr_mask)."""
    pairs = []
    for s in samples:
        for i in range(s.ilr.shape[0]):
            pairs.append((s.ilr[i], s.masks[i], s.hr, s.hr_mask))
    return pairs


def residual_stats(inputs, targets, masks):
    """Mean/std of the target-minus-input residual over clear pixels."""
    vals = []
    for x, hr, m in zip(inputs, targets, masks):
        if m.any():
            vals.append((hr - x)[m])
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std())


def pretrain_sisr(samples, cfg: TrainConfig, model_cfg: ModelConfig,
                  params=None, log=None, holdout=None, start_epoch=0):
    """Train the feature extractor + projection head on single images."""
    log = log or TrainLog()
    rng = np.random.default_rng(cfg.seed)
    if params is None:
        params = init_model_params(model_cfg, seed=cfg.seed)
    pairs = sisr_training_pairs(samples)
    if not pairs:
        raise ValueError("no training pairs; check the patch policy")

    m, s = residual_stats(
        [p[0] for p in pairs], [p[2] for p in pairs],
        [p[1] & p[3] for p in pairs],
    )
    params["sisr_res.stats"].data = np.array([m, max(s, 1e-6)])

    adam = cfg.make_adam()
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.time()
        total, count = 0.0, 0
        for batch in _batches(len(pairs), cfg.batch_size, rng):
            used = 0
            for j in batch:
                ilr, mask, hr, hr_mask = pairs[j]
                sr = sisr_forward(Tensor(ilr, requires_grad=True), params, model_cfg)
                try:
                    score = corrected_loss(sr, hr, hr_mask, mask, d=cfg.d)
                except UnscorableSampleError:
                    continue
                score.node.backward()
                total += score.value
                count += 1
                used += 1
            if used:
                _apply_batch_grads(params, "sisr.", used, adam)
            else:
                zero_grads(params)
        train_loss = total / max(count, 1)
        if not np.isfinite(train_loss):
            raise FloatingPointError(f"stage sisr_pretrain: loss became non-finite at epoch {epoch}")
        log.write(stage="sisr_pretrain", epoch=epoch, train_loss=f"{train_loss:.4f}",
                  wall=f"{time.time() - t0:.2f}")
    if holdout:
        hold = evaluate_sisr_loss(holdout, params, model_cfg, d=cfg.d)
        log.write(stage="sisr_pretrain", holdout_loss=f"{hold:.4f}")
    return params, log


def evaluate_sisr_loss(samples, params, model_cfg, d=3):
    pairs = sisr_training_pairs(samples)
    vals = []
    for ilr, mask, hr, hr_mask in pairs:
        sr = sisr_forward(Tensor(ilr), params, model_cfg)
        try:
            vals.append(corrected_loss(sr.data, hr, hr_mask, mask, d=d).value)
        except UnscorableSampleError:
            continue
    return float(np.mean(vals)) if vals else float("nan")


# -- stage 2: shift classification pretraining ------------------------


def _shift_feature_map(fmap, dy, dx):
    """Integer-shift every channel of [H, W, F] with edge replication."""
    h, w, _ = fmap.shape
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return fmap[np.ix_(ys, xs)]


def make_shift_classification_set(samples, params, model_cfg: ModelConfig,
                                  num_items, rng, crop=0):
    """Feature stacks with known synthetic shifts, balanced over classes.

    Each item is (features [N,H,W,F], labels [N-1] of flat shift class).
    One acquisition's feature map from the frozen extractor serves as the
    reference; items 1..N-1 are exact shifted copies of it labeled by
    their shift, so the label is the true relative displacement (copies
    of *other* acquisitions would carry their residual subpixel
    misalignment and poison the labels). With ``crop`` > 0 every map is
    center-cropped to that size after shifting, so (when the margin
    covers the largest shift) the copies are pure translations with no
    replicated border pixels.
    """
    K = model_cfg.filter_size
    c = K // 2
    n = model_cfg.n_images
    class_pool = []
    items = []
    for t in range(num_items):
        s = samples[int(rng.integers(0, len(samples)))]
        j = int(rng.integers(0, s.ilr.shape[0]))
        base = sisrnet_forward(Tensor(s.ilr[j:j + 1]), params, model_cfg).data[0]
        h, w = base.shape[:2]
        cy = (h - crop) // 2 if crop else 0
        cx = (w - crop) // 2 if crop else 0
        sl = (slice(cy, cy + crop), slice(cx, cx + crop)) if crop else (slice(None),) * 2
        labels = np.empty(n - 1, dtype=np.intp)
        feats = np.empty((n, *base[sl].shape[:2], base.shape[2]))
        feats[0] = base[sl]
        for i in range(1, n):
            if not class_pool:
                class_pool = list(rng.permutation(K * K))
            cls = int(class_pool.pop())
            dy, dx = cls // K - c, cls % K - c
            feats[i] = _shift_feature_map(base, dy, dx)[sl]
            labels[i - 1] = cls
        items.append((feats, labels))
    return items


def regnet_loss(features, labels, params, model_cfg):
    """Cross-entropy between the softmax filters and one-hot shift labels."""
    from .model import regnet_forward

    bank = regnet_forward(Tensor(features), params, model_cfg)
    n1, K, _ = bank.filters.shape
    flat = reshape(bank.filters, (n1, K * K))
    picked = flat[np.arange(n1), labels]
    ce = tmean(neg(tlog(picked)))
    pred = np.argmax(flat.data, axis=1)
    return ce, bank, int((pred == labels).sum())


def pretrain_regnet(params, samples, cfg: TrainConfig, model_cfg: ModelConfig,
                    num_train=200, num_holdout=40, log=None, start_epoch=0,
                    crop=0):
    """Train the registration subnetwork as K^2-way shift classification.

    The feature extractor stays frozen: only reg.* parameters update.
    Returns (params, holdout accuracy, log).
    """
    log = log or TrainLog()
    rng = np.random.default_rng(cfg.seed + 1)
    train_items = make_shift_classification_set(samples, params, model_cfg,
                                                num_train, rng, crop=crop)
    hold_items = make_shift_classification_set(samples, params, model_cfg,
                                               num_holdout, rng, crop=crop)

    adam = cfg.make_adam()
    for epoch in range(start_epoch, cfg.epochs):
        t0 = time.time()
        total, correct, seen = 0.0, 0, 0
        for batch in _batches(len(train_items), cfg.batch_size, rng):
            for j in batch:
                feats, labels = train_items[j]
                ce, _, ok = regnet_loss(feats, labels, params, model_cfg)
                ce.backward()
                total += ce.item()
                correct += ok
                seen += len(labels)
            _apply_batch_grads(params, "reg.", len(batch), adam)
        if not np.isfinite(total):
            raise FloatingPointError(f"stage regnet_pretrain: loss became non-finite at epoch {epoch}")
        log.write(stage="regnet_pretrain", epoch=epoch,
                  train_loss=f"{total / len(train_items):.4f}",
                  train_acc=f"{correct / seen:.4f}", wall=f"{time.time() - t0:.2f}")
    acc = regnet_accuracy(hold_items, params, model_cfg)
    log.write(stage="regnet_pretrain", holdout_acc=f"{acc:.4f}")
    return params, acc, log


def regnet_accuracy(items, params, model_cfg):
    correct, seen = 0, 0
    for feats, labels in items:
        ce, _, ok = regnet_loss(feats, labels, params, model_cfg)
        correct += ok
        seen += len(labels)
    return correct / max(seen, 1)


# -- stage 3: end-to-end ----------------------------------------------


def compute_residual_stats(samples):
    """Statistics of (target - mean input) over clear pixels, for the
    residual head normalization."""
    vals = []
    for s in samples:
        avg = s.ilr.mean(axis=0)
        m = s.hr_mask & s.joint_clear
        if m.any():
            vals.append((s.hr - avg)[m])
    v = np.concatenate(vals)
    return float(v.mean()), float(v.std())


def sample_forward(sample: TrainingSample, params, model_cfg, requires_grad=False):
    x = Tensor(sample.ilr, requires_grad=requires_grad)
    return deepsum_forward(x, sample.masks, params, model_cfg)


def validate_mpsnr(samples, params, model_cfg, d=3):
    vals = []
    for s in samples:
        sr, _ = sample_forward(s, params, model_cfg)
        try:
            vals.append(mpsnr(sr.data, s.hr, s.hr_mask, s.joint_clear, d=d).value)
        except UnscorableSampleError:
            continue
    return float(np.mean(vals)) if vals else float("nan")


def train_end_to_end(params, samples, cfg: TrainConfig, model_cfg: ModelConfig,
                     val_samples=None, log=None, start_epoch=0):
    """Joint optimization of all three subnetworks with the corrected loss."""
    log = log or TrainLog()
    rng = np.random.default_rng(cfg.seed + 2)

    m, s = compute_residual_stats(samples)
    params["res.stats"].data = np.array([m, max(s, 1e-6)])

    adam = cfg.make_adam()
    best = params_arrays(params)
    best = {k: v.copy() for k, v in best.items()}
    best_val = -np.inf
    worse = 0
    for epoch in range(start_epoch, cfg.epochs):
        if cfg.restart_every and epoch and epoch % cfg.restart_every == 0:
            # warm restart: discard optimizer moments and replay the batch
            # order, so late training takes fresh bias-corrected steps
            adam = cfg.make_adam()
            rng = np.random.default_rng(cfg.seed + 2)
        t0 = time.time()
        total, count = 0.0, 0
        for batch in _batches(len(samples), cfg.batch_size, rng):
            used = 0
            for j in batch:
                sample = samples[j]
                sr, _ = sample_forward(sample, params, model_cfg, requires_grad=True)
                try:
                    score = corrected_loss(sr, sample.hr, sample.hr_mask,
                                           sample.joint_clear, d=cfg.d)
                except UnscorableSampleError:
                    continue
                score.node.backward()
                total += score.value
                count += 1
                used += 1
            if used:
                _apply_batch_grads(params, "", used, adam)
            else:
                zero_grads(params)
        train_loss = total / max(count, 1)
        if not np.isfinite(train_loss):
            raise FloatingPointError(f"stage end_to_end: loss became non-finite at epoch {epoch}")
        rec = dict(stage="end_to_end", epoch=epoch, train_loss=f"{train_loss:.4f}")
        if val_samples and ((epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1):
            val = validate_mpsnr(val_samples, params, model_cfg, d=cfg.d)
            rec["val_mpsnr"] = f"{val:.4f}"
            if val > best_val:
                best_val = val
                best = {k: v.copy() for k, v in params_arrays(params).items()}
                worse = 0
            else:
                worse += 1
                if worse >= cfg.patience:
                    rec["stopped"] = "divergence_guard"
                    log.write(**rec, wall=f"{time.time() - t0:.2f}")
                    break
        log.write(**rec, wall=f"{time.time() - t0:.2f}")
    if val_samples and np.isfinite(best_val):
        set_params_arrays(params, best)
    return params, log


# -- inference --------------------------------------------------------


def sliding_window_infer(scene, params, model_cfg: ModelConfig,
                         scfg: SlidingConfig = None, r=3):
    """Average reconstructions from up to num_estimates windows of the
    clarity-sorted acquisitions, the clearest image fixed as reference."""
    scfg = scfg or SlidingConfig(window=model_cfg.n_images)
    prep = prepare_ilr_stack(scene, r=r)
    m = prep.ilr.shape[0]
    n = scfg.window
    if m < n:
        raise ValueError(f"scene has {m} images, the window needs {n}")
    num = min(scfg.num_estimates, m - n + 1)
    estimates = []
    for w in range(num):
        if w == 0:
            pick = np.arange(n)
        else:
            pick = np.concatenate([[0], np.arange(w + 1, w + n)])
        sr, _ = deepsum_forward(Tensor(prep.ilr[pick]), prep.masks[pick],
                                params, model_cfg)
        estimates.append(sr.data)
    return np.mean(estimates, axis=0), prep
