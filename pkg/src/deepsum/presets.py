"""Desk-scale presets: configurations small enough to generate data,
train all three stages, and compare against every baseline on a single
CPU in minutes, while keeping the full architecture shape (9 input
images, 7x7 dynamic filters, three subnetworks).

The full-scale defaults on the config dataclasses mirror the original
problem; these presets only shrink capacity and iteration counts.
"""

from __future__ import annotations

from .datagen import DegradationConfig, PatchPolicy
from .model import ModelConfig
from .training import TrainConfig


def desk_model() -> ModelConfig:
    return ModelConfig(
        n_images=9,
        r=3,
        features=8,
        regnet_first_channels=49,
        regnet_mid_channels=49,
        regnet_spatial_kernel=7,
        filter_size=7,
        sisrnet_layers=3,
        regnet_2d_layers=3,
        fusion_temporal_kernel=3,
    )


def desk_train(stage: str, seed: int = 0) -> TrainConfig:
    epochs = {"sisr_pretrain": 4, "regnet_pretrain": 10, "end_to_end": 24}[stage]
    lr = {"sisr_pretrain": 1e-3, "regnet_pretrain": 5e-5, "end_to_end": 1e-3}[stage]
    batch = {"sisr_pretrain": 8, "regnet_pretrain": 2, "end_to_end": 8}[stage]
    return TrainConfig(
        stage=stage,
        epochs=epochs,
        batch_size=batch,
        lr=lr,
        seed=seed,
        val_every=2,
        restart_every=12 if stage == "end_to_end" else 0,
    )


def desk_degradation(seed: int = 0, n_images: int = 9) -> DegradationConfig:
    return DegradationConfig(
        r=3,
        blur_sigma=1.0,
        max_subpixel_shift=1.0,
        brightness_jitter=300.0,
        noise_sigma=50.0,
        cloud_coverage=0.08,
        n_images=n_images,
        seed=seed,
    )


def desk_patches() -> PatchPolicy:
    return PatchPolicy(
        patch_hr=36,
        patches_per_scene=6,
        min_clear_lr=0.70,
        min_clear_hr=0.85,
        min_images=9,
    )


DESK_HR_SIZE = 48
DESK_SCENES = 12
DESK_REGNET_ITEMS = 250
DESK_REGNET_CROP = 18
