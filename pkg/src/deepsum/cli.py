"""Batch command-line front end.

Subcommands: gen-data, train, infer, eval, baseline, bench. Every run
writes a ``run_manifest.txt`` beside its outputs. Exit codes: 0 success,
2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import datetime
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import baselines, presets
from .checkpoint import load_checkpoint, save_checkpoint
from .configio import ConfigError
from .datagen import (
    DegradationConfig,
    discover_scenes,
    extract_patches,
    load_scene,
    make_hr_source,
    prepare_ilr_stack,
    synthesize_scene,
    write_scene,
)
from .imaging import load_image16, load_mask, save_image16
from .metrics import UnscorableSampleError, mpsnr, ssim
from .model import ModelConfig, init_model_params, params_arrays, set_params_arrays
from .training import (
    SlidingConfig,
    TrainConfig,
    TrainLog,
    pretrain_regnet,
    pretrain_sisr,
    sliding_window_infer,
    train_end_to_end,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

STAGE_NAMES = {"sisr": "sisr_pretrain", "regnet": "regnet_pretrain", "e2e": "end_to_end"}
STAGE_CKPTS = {"sisr_pretrain": "sisr.ckpt", "regnet_pretrain": "regnet.ckpt",
               "end_to_end": "e2e.ckpt"}


class DataError(Exception):
    """Missing, malformed, or mismatched inputs."""


def _write_manifest(out_dir, args, started, extra=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    argv = [f"{k}={v}" for k, v in sorted(vars(args).items()) if k != "func"]
    run_id = hashlib.sha256(" ".join(argv).encode()).hexdigest()[:12]
    lines = [
        f"command = {args.command}",
        f"run_id = {run_id}",
        f"started = {started.isoformat()}",
        f"finished = {datetime.datetime.now().isoformat()}",
    ]
    for kv in argv:
        lines.append(f"arg.{kv}")
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    (out_dir / "run_manifest.txt").write_text("\n".join(lines) + "\n")


def _read_config(cls, path, default):
    if path is None:
        return default
    try:
        return cls.from_text(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file not found: {path}") from e


# -- gen-data ----------------------------------------------------------


def cmd_gen_data(args):
    base = _read_config(DegradationConfig, args.config, presets.desk_degradation())
    if args.hr_size % base.r:
        raise ConfigError(
            f"--hr-size {args.hr_size} is not divisible by the decimation factor {base.r}"
        )
    out = Path(args.out)
    for i in range(args.scenes):
        rng = np.random.default_rng([args.seed, i])
        n_images = int(rng.integers(9, 14))
        cfg = DegradationConfig(
            r=base.r,
            blur_sigma=base.blur_sigma,
            max_subpixel_shift=base.max_subpixel_shift,
            brightness_jitter=base.brightness_jitter,
            noise_sigma=base.noise_sigma,
            cloud_coverage=base.cloud_coverage,
            n_images=n_images,
            seed=int(rng.integers(0, 2 ** 31)),
        )
        hr = make_hr_source(args.hr_size, rng)
        scene = synthesize_scene(hr, cfg, scene_id=f"scene_{i:03d}")
        write_scene(scene, out / scene.scene_id)
    print(f"wrote {args.scenes} scenes under {out}")
    return {"scenes": args.scenes, "hr_size": args.hr_size}


# -- train -------------------------------------------------------------


def _load_training_data(data_dir, model_cfg, policy, seed):
    dirs = discover_scenes(data_dir)
    if not dirs:
        raise DataError(f"no scene directories under {data_dir}")
    scenes = [load_scene(d) for d in dirs]
    n_val = max(1, len(scenes) // 6)
    train_scenes, val_scenes = scenes[:-n_val], scenes[-n_val:]
    rng = np.random.default_rng(seed)
    train = [p for s in train_scenes for p in extract_patches(s, policy, rng, r=model_cfg.r)]
    val = [p for s in val_scenes for p in extract_patches(s, policy, rng, r=model_cfg.r)]
    if not train:
        raise DataError("no accepted training patches; data too cloudy or too small")
    return train, val


def _require_checkpoint(out_dir, stage):
    path = Path(out_dir) / STAGE_CKPTS[stage]
    if not path.exists():
        raise DataError(
            f"missing prerequisite checkpoint {path}: run the {stage!r} stage first"
        )
    return path


def _last_epoch(log_path, stage):
    """Highest epoch number recorded for a stage, or -1."""
    last = -1
    if Path(log_path).exists():
        for line in Path(log_path).read_text().splitlines():
            kv = dict(p.split("=", 1) for p in line.split() if "=" in p)
            if kv.get("stage") == stage and "epoch" in kv:
                last = max(last, int(kv["epoch"]))
    return last


def cmd_train(args):
    stage = STAGE_NAMES[args.stage]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model_cfg_path = out / "model.cfg"
    if args.model_config:
        model_cfg = _read_config(ModelConfig, args.model_config, None)
    elif model_cfg_path.exists():
        model_cfg = ModelConfig.from_text(model_cfg_path.read_text())
    else:
        model_cfg = presets.desk_model()
    model_cfg_path.write_text(model_cfg.to_text())

    cfg = _read_config(TrainConfig, args.config, presets.desk_train(stage, seed=args.seed))
    if cfg.stage != stage:
        cfg.stage = stage
    train, val = _load_training_data(args.data, model_cfg, presets.desk_patches(), cfg.seed)

    log_path = out / f"train_{stage}.log"
    start_epoch = 0
    params = init_model_params(model_cfg, seed=cfg.seed)
    ckpt_path = out / STAGE_CKPTS[stage]
    if args.resume and ckpt_path.exists():
        set_params_arrays(params, load_checkpoint(ckpt_path))
        start_epoch = _last_epoch(log_path, stage) + 1
    elif log_path.exists():
        log_path.unlink()
    log = TrainLog(path=log_path, echo=True)

    if stage == "sisr_pretrain":
        pretrain_sisr(train, cfg, model_cfg, params=params, log=log,
                      holdout=val, start_epoch=start_epoch)
    elif stage == "regnet_pretrain":
        if not (args.resume and ckpt_path.exists()):
            set_params_arrays(params, load_checkpoint(_require_checkpoint(out, "sisr_pretrain")))
        _, acc, _ = pretrain_regnet(params, train, cfg, model_cfg, log=log,
                                    num_train=args.regnet_items,
                                    num_holdout=max(args.regnet_items // 5, 10),
                                    start_epoch=start_epoch, crop=args.regnet_crop)
        print(f"holdout shift-classification accuracy: {acc:.4f}")
    else:
        if not (args.resume and ckpt_path.exists()):
            set_params_arrays(params, load_checkpoint(_require_checkpoint(out, "regnet_pretrain")))
        train_end_to_end(params, train, cfg, model_cfg, val_samples=val, log=log,
                         start_epoch=start_epoch)

    save_checkpoint(ckpt_path, params_arrays(params))
    print(f"saved {ckpt_path}")
    return {"stage": stage, "checkpoint": str(ckpt_path)}


# -- infer -------------------------------------------------------------


def _load_model(model_dir, ckpt_name="e2e.ckpt"):
    model_dir = Path(model_dir)
    cfg_path = model_dir / "model.cfg"
    if not cfg_path.exists():
        raise DataError(f"no model.cfg in {model_dir}")
    model_cfg = ModelConfig.from_text(cfg_path.read_text())
    ckpt = model_dir / ckpt_name
    if not ckpt.exists():
        raise DataError(f"no checkpoint {ckpt}")
    params = init_model_params(model_cfg, seed=0)
    try:
        set_params_arrays(params, load_checkpoint(ckpt))
    except (KeyError, ValueError) as e:
        raise DataError(f"checkpoint does not match model.cfg: {e}") from e
    return params, model_cfg


def cmd_infer(args):
    params, model_cfg = _load_model(args.model)
    scene = load_scene(args.scene, min_images=model_cfg.n_images)
    num = args.sliding if args.sliding else 1
    scfg = SlidingConfig(window=model_cfg.n_images, num_estimates=num)
    sr, _ = sliding_window_infer(scene, params, model_cfg, scfg, r=model_cfg.r)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image16(out, sr)
    print(f"wrote {out}")
    return {"scene": str(args.scene), "estimates": num, "output": str(out)}


# -- eval --------------------------------------------------------------


def _load_truth(path):
    path = Path(path)
    if path.is_dir():
        hr_path = path / "HR.png"
        if not hr_path.exists():
            raise DataError(f"{path} has no HR.png target")
        hr = load_image16(hr_path)
        sm = path / "SM.png"
        hr_mask = load_mask(sm) if sm.exists() else np.ones_like(hr, dtype=bool)
        return hr, hr_mask
    hr = load_image16(path)
    return hr, np.ones_like(hr, dtype=bool)


def cmd_eval(args):
    pred = load_image16(args.pred)
    hr, hr_mask = _load_truth(args.truth)
    if pred.shape != hr.shape:
        raise DataError(f"shape mismatch: prediction {pred.shape}, target {hr.shape}")
    try:
        score = mpsnr(pred, hr, hr_mask, d=args.d)
    except UnscorableSampleError as e:
        raise DataError(str(e)) from e
    s = ssim(pred, hr)
    lines = [
        f"mpsnr_db = {score.value:.2f}",
        f"ssim = {s:.4f}",
        f"best_shift = {score.best_shift[0]} {score.best_shift[1]}",
        f"brightness = {score.brightness:.4f}",
        f"clear_pixels = {score.clear_pixels}",
    ]
    report = "\n".join(lines)
    print(report)
    if args.out:
        Path(args.out).write_text(report + "\n")
    return {"mpsnr_db": f"{score.value:.2f}", "ssim": f"{s:.4f}"}


# -- baseline ----------------------------------------------------------


def cmd_baseline(args):
    scene = load_scene(args.scene)
    prep = prepare_ilr_stack(scene, r=args.r)
    if args.method in ("ibp", "btv"):
        fm = baselines.forward_model_for_scene(prep, blur_sigma=args.blur_sigma, r=args.r)
    if args.method in ("sisr", "sisr-mean"):
        if not args.model:
            raise ConfigError(f"--method {args.method} needs --model")
        params, model_cfg = _load_model(args.model, ckpt_name="sisr.ckpt")

    if args.method == "bicubic":
        sr = baselines.bicubic(scene, r=args.r, prep=prep)
    elif args.method == "bicubic-mean":
        sr = baselines.bicubic_mean(scene, r=args.r, prep=prep)
    elif args.method == "ibp":
        sr = baselines.ibp(scene, fm, r=args.r, prep=prep)
    elif args.method == "btv":
        sr = baselines.btv(scene, fm, r=args.r, prep=prep)
    elif args.method == "sisr":
        sr = baselines.sisr(scene, params, model_cfg, r=args.r, prep=prep)
    else:
        sr = baselines.sisr_and_mean(scene, params, model_cfg,
                                     n_images=model_cfg.n_images, r=args.r, prep=prep)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_image16(out, sr)
    print(f"wrote {out}")
    return {"method": args.method, "output": str(out)}


def cmd_bench(args):
    from .bench import run_bench

    run_bench(repeats=args.repeats, scale=args.scale)
    return {}


# -- argument parsing --------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="deepsum",
                                description="Multi-image super-resolution pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="synthesize scene directories")
    g.add_argument("--out", required=True)
    g.add_argument("--config", help="degradation config file")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--scenes", type=int, default=presets.DESK_SCENES)
    g.add_argument("--hr-size", type=int, default=presets.DESK_HR_SIZE)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--stage", required=True, choices=sorted(STAGE_NAMES))
    t.add_argument("--data", required=True, help="directory of scene directories")
    t.add_argument("--out", required=True, help="checkpoint/log directory")
    t.add_argument("--config", help="training config file")
    t.add_argument("--model-config", help="model config file")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--regnet-items", type=int, default=presets.DESK_REGNET_ITEMS,
                   help="shift-classification stacks for the regnet stage")
    t.add_argument("--regnet-crop", type=int, default=presets.DESK_REGNET_CROP,
                   help="center-crop size for shift-classification feature maps")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("infer", help="reconstruct one scene")
    i.add_argument("--model", required=True, help="directory with model.cfg + e2e.ckpt")
    i.add_argument("--scene", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--sliding", type=int, default=0,
                   help="average this many sliding-window estimates")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score a reconstruction")
    e.add_argument("--pred", required=True)
    e.add_argument("--truth", required=True, help="scene directory or HR image")
    e.add_argument("--out", help="also write the report here")
    e.add_argument("--d", type=int, default=3)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("baseline", help="run a comparison method")
    b.add_argument("--method", required=True,
                   choices=["bicubic", "bicubic-mean", "ibp", "btv", "sisr", "sisr-mean"])
    b.add_argument("--scene", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--model", help="model directory (sisr methods)")
    b.add_argument("--r", type=int, default=3)
    b.add_argument("--blur-sigma", type=float, default=1.0)
    b.set_defaults(func=cmd_baseline)

    n = sub.add_parser("bench", help="benchmark the convolution backends")
    n.add_argument("--repeats", type=int, default=3)
    n.add_argument("--scale", type=float, default=1.0)
    n.set_defaults(func=cmd_bench)
    return p


def _manifest_dir(args):
    out = getattr(args, "out", None)
    if out is None:
        return None
    out = Path(out)
    return out if (out.suffix == "" or out.is_dir()) else out.parent


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    started = datetime.datetime.now()
    try:
        extra = args.func(args)
    except ConfigError as e:
        print(f"configuration error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, ValueError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except (FloatingPointError, ZeroDivisionError) as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    md = _manifest_dir(args)
    if md is not None:
        _write_manifest(md, args, started, extra)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
