"""Three-stage training protocol and sliding-window inference."""

import numpy as np
import pytest

from deepsum.autodiff import Tensor
from deepsum.checkpoint import load_checkpoint, save_checkpoint
from deepsum.datagen import DegradationConfig, Scene, TrainingSample, make_hr_source, synthesize_scene
from deepsum.model import (
    ModelConfig,
    deepsum_forward,
    init_model_params,
    params_arrays,
    trainable,
)
from deepsum.training import (
    SlidingConfig,
    TrainConfig,
    TrainLog,
    _shift_feature_map,
    compute_residual_stats,
    evaluate_sisr_loss,
    make_shift_classification_set,
    pretrain_regnet,
    pretrain_sisr,
    regnet_accuracy,
    sisr_training_pairs,
    sliding_window_infer,
    train_end_to_end,
    validate_mpsnr,
)


def tiny_model():
    return ModelConfig(n_images=3, features=4, regnet_first_channels=6,
                       sisrnet_layers=2, regnet_2d_layers=2)


def tiny_samples(rng, count=4, n=3, p=14):
    samples = []
    for _ in range(count):
        hr = rng.uniform(1000, 9000, (p, p))
        ilr = np.stack([hr + rng.normal(0, 200, (p, p)) for _ in range(n)])
        samples.append(TrainingSample(
            ilr=ilr,
            masks=np.ones((n, p, p), bool),
            hr=hr,
            hr_mask=np.ones((p, p), bool),
        ))
    return samples


def test_train_config_validation_and_roundtrip():
    with pytest.raises(ValueError):
        TrainConfig(stage="warmup")
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    cfg = TrainConfig(stage="sisr_pretrain", epochs=3, lr=1e-4, seed=7)
    assert TrainConfig.from_text(cfg.to_text()) == cfg


def test_sliding_config_validation():
    with pytest.raises(ValueError):
        SlidingConfig(num_estimates=0)


def test_train_log_records_and_file(tmp_path):
    p = tmp_path / "log.txt"
    log = TrainLog(path=p)
    log.write(stage="end_to_end", epoch=0, train_loss="1.0")
    log.write(stage="end_to_end", epoch=1, train_loss="0.5")
    assert len(log.records) == 2
    lines = p.read_text().splitlines()
    assert lines[0] == "stage=end_to_end epoch=0 train_loss=1.0"


def test_sisr_training_pairs_split(rng):
    samples = tiny_samples(rng, count=2)
    pairs = sisr_training_pairs(samples)
    assert len(pairs) == 6
    assert np.array_equal(pairs[0][0], samples[0].ilr[0])
    assert np.array_equal(pairs[0][2], samples[0].hr)


def test_pretrain_sisr_reduces_loss(rng):
    mc = tiny_model()
    samples = tiny_samples(rng, count=4)
    hold = tiny_samples(rng, count=2)
    cfg = TrainConfig(stage="sisr_pretrain", epochs=6, lr=1e-3, batch_size=4, seed=0)
    params, log = pretrain_sisr(samples, cfg, mc, holdout=hold)
    losses = [float(r["train_loss"]) for r in log.records if "train_loss" in r
              and "epoch" in r]
    assert losses[-1] < losses[0]
    assert np.isfinite(evaluate_sisr_loss(hold, params, mc))
    assert len(losses) == 6


def test_pretrain_sisr_touches_only_sisr_weights(rng):
    mc = tiny_model()
    samples = tiny_samples(rng, count=2)
    params = init_model_params(mc, seed=0)
    before = {k: v.copy() for k, v in params_arrays(params).items()}
    cfg = TrainConfig(stage="sisr_pretrain", epochs=1, lr=1e-3, seed=0)
    pretrain_sisr(samples, cfg, mc, params=params)
    for k, v in params_arrays(params).items():
        if k.startswith(("reg.", "fus.")) or k == "res.stats":
            assert np.array_equal(v, before[k]), k
    assert not np.array_equal(params["sisr.conv0.w"].data, before["sisr.conv0.w"])


def test_shift_feature_map_matches_roll_interior(rng):
    f = rng.uniform(size=(10, 10, 2))
    out = _shift_feature_map(f, 2, -1)
    want = np.roll(f, (2, -1), axis=(0, 1))
    assert np.array_equal(out[3:-3, 3:-3], want[3:-3, 3:-3])


def test_classification_set_balanced_and_exact(rng):
    mc = tiny_model()
    params = init_model_params(mc, seed=0)
    samples = tiny_samples(rng, count=3, p=20)
    items = make_shift_classification_set(samples, params, mc, 100,
                                          np.random.default_rng(0), crop=12)
    K = mc.filter_size
    counts = np.zeros(K * K, int)
    for feats, labels in items:
        assert feats.shape == (3, 12, 12, mc.features)
        counts[labels] += 1
    total = counts.sum()
    # every class within +-5% of the uniform share
    share = counts / total
    assert np.all(np.abs(share - 1.0 / (K * K)) <= 0.05)
    # labeled items really are shifted copies of the reference map:
    # shifting the cropped reference reproduces each item's interior
    c = K // 2
    inner = slice(c, -c)
    for feats, labels in items[:10]:
        for i in range(1, feats.shape[0]):
            dy, dx = labels[i - 1] // K - c, labels[i - 1] % K - c
            want = _shift_feature_map(feats[0], dy, dx)
            assert np.allclose(feats[i][inner, inner], want[inner, inner],
                               atol=1e-12)


def test_pretrain_regnet_improves_and_isolates(rng):
    mc = tiny_model()
    params = init_model_params(mc, seed=0)
    samples = tiny_samples(rng, count=3, p=22)
    before = {k: v.copy() for k, v in params_arrays(params).items()}
    cfg = TrainConfig(stage="regnet_pretrain", epochs=3, lr=1e-3, batch_size=4, seed=0)
    params, acc, log = pretrain_regnet(params, samples, cfg, mc,
                                       num_train=20, num_holdout=10, crop=14)
    assert 0.0 <= acc <= 1.0
    for k, v in params_arrays(params).items():
        if k.startswith(("sisr.", "fus.")):
            assert np.array_equal(v, before[k]), k
    changed = any(
        not np.array_equal(params_arrays(params)[k], before[k])
        for k in before if k.startswith("reg.")
    )
    assert changed
    assert log.records[-1].get("holdout_acc") is not None


def test_end_to_end_reduces_loss_and_moves_all_subnets(rng):
    mc = tiny_model()
    samples = tiny_samples(rng, count=4)
    params = init_model_params(mc, seed=0)
    before = {k: v.copy() for k, v in params_arrays(params).items()}
    v0 = validate_mpsnr(samples, params, mc)
    cfg = TrainConfig(stage="end_to_end", epochs=6, lr=1e-3, batch_size=4,
                      seed=0, val_every=2)
    params, log = train_end_to_end(params, samples, cfg, mc, val_samples=samples)
    v1 = validate_mpsnr(samples, params, mc)
    assert v1 > v0
    for prefix in ("sisr.", "reg.", "fus."):
        moved = any(
            not np.array_equal(params_arrays(params)[k], before[k])
            for k in before if k.startswith(prefix)
        )
        assert moved, prefix


def test_end_to_end_sets_residual_stats(rng):
    samples = tiny_samples(rng, count=3)
    m, s = compute_residual_stats(samples)
    assert np.isfinite(m) and s > 0
    mc = tiny_model()
    params = init_model_params(mc, seed=0)
    cfg = TrainConfig(stage="end_to_end", epochs=1, lr=1e-4, seed=0)
    params, _ = train_end_to_end(params, samples, cfg, mc)
    assert params["res.stats"].data[0] == pytest.approx(m)
    assert params["res.stats"].data[1] == pytest.approx(s)


def test_restart_every_validation_and_effect(rng):
    with pytest.raises(ValueError):
        TrainConfig(restart_every=-1)
    mc = tiny_model()
    samples = tiny_samples(rng, count=3)

    def run(restart):
        params = init_model_params(mc, seed=1)
        cfg = TrainConfig(stage="end_to_end", epochs=4, lr=1e-3, seed=1,
                          restart_every=restart)
        params, _ = train_end_to_end(params, samples, cfg, mc)
        return params_arrays(params)

    a, b, c = run(2), run(2), run(0)
    for k in a:
        assert np.array_equal(a[k], b[k]), k     # restarts stay deterministic
    assert any(not np.array_equal(a[k], c[k]) for k in a)


def test_training_is_deterministic(rng):
    mc = tiny_model()
    samples = tiny_samples(rng, count=3)
    cfg = TrainConfig(stage="end_to_end", epochs=2, lr=1e-3, seed=3)
    outs = []
    for _ in range(2):
        params = init_model_params(mc, seed=3)
        params, _ = train_end_to_end(params, samples, cfg, mc)
        outs.append(params_arrays(params))
    for k in outs[0]:
        assert np.array_equal(outs[0][k], outs[1][k]), k


def test_checkpoint_roundtrip_of_trained_params(tmp_path, rng):
    mc = tiny_model()
    samples = tiny_samples(rng, count=2)
    params = init_model_params(mc, seed=0)
    cfg = TrainConfig(stage="end_to_end", epochs=1, lr=1e-3, seed=0)
    params, _ = train_end_to_end(params, samples, cfg, mc)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, params_arrays(params))
    back = load_checkpoint(path)
    for k, v in params_arrays(params).items():
        assert np.array_equal(back[k], v), k


def scene_with_n(rng, n, size=36):
    cfg = DegradationConfig(n_images=n, cloud_coverage=0.0, seed=int(rng.integers(1 << 30)))
    return synthesize_scene(make_hr_source(size, rng), cfg)


def test_sliding_single_window_equals_direct(rng):
    mc = tiny_model()
    params = init_model_params(mc, seed=1)
    scene = scene_with_n(rng, 3)
    out, prep = sliding_window_infer(scene, params, mc,
                                     SlidingConfig(window=3, num_estimates=5))
    direct, _ = deepsum_forward(Tensor(prep.ilr), prep.masks, params, mc)
    assert np.array_equal(out, direct.data)


def test_sliding_uses_extra_images(rng):
    mc = tiny_model()
    params = init_model_params(mc, seed=1)
    scene = scene_with_n(rng, 5)
    single, prep = sliding_window_infer(scene, params, mc,
                                        SlidingConfig(window=3, num_estimates=1))
    multi, _ = sliding_window_infer(scene, params, mc,
                                    SlidingConfig(window=3, num_estimates=3))
    assert single.shape == multi.shape
    assert not np.array_equal(single, multi)


def test_sliding_too_few_images(rng):
    mc = tiny_model()
    params = init_model_params(mc, seed=1)
    scene = scene_with_n(rng, 3)
    with pytest.raises(ValueError):
        sliding_window_infer(scene, params, mc, SlidingConfig(window=5))


def test_regnet_accuracy_bounds(rng):
    mc = tiny_model()
    params = init_model_params(mc, seed=0)
    samples = tiny_samples(rng, count=2, p=20)
    items = make_shift_classification_set(samples, params, mc, 10,
                                          np.random.default_rng(1), crop=12)
    acc = regnet_accuracy(items, params, mc)
    assert 0.0 <= acc <= 1.0
