"""Adam optimizer and checkpoint format."""

import numpy as np
import pytest

from deepsum.checkpoint import load_checkpoint, save_checkpoint
from deepsum.optim import AdamState, adam_step


def test_adam_converges_on_quadratic():
    # minimize sum((x - t)^2); 1000 steps should land within 1e-3
    rng = np.random.default_rng(0)
    t = rng.standard_normal(6)
    x = {"x": rng.standard_normal(6)}
    state = AdamState(lr=0.05)
    for _ in range(1000):
        adam_step(x, {"x": 2 * (x["x"] - t)}, state)
    assert np.abs(x["x"] - t).max() < 1e-3


def test_adam_bias_correction_first_step():
    # first update has magnitude ~lr regardless of gradient scale
    for scale in (1e-2, 1.0, 1e4):
        x = {"x": np.zeros(1)}
        state = AdamState(lr=0.1)
        adam_step(x, {"x": np.array([scale])}, state)
        assert x["x"][0] == pytest.approx(-0.1, rel=1e-3)


def test_adam_rejects_non_finite_grads():
    x = {"x": np.zeros(2)}
    with pytest.raises(FloatingPointError):
        adam_step(x, {"x": np.array([1.0, np.nan])}, AdamState())


def test_adam_deterministic():
    def run():
        x = {"a": np.ones(3)}
        s = AdamState(lr=0.01)
        for i in range(50):
            adam_step(x, {"a": np.sin(x["a"] + i)}, s)
        return x["a"]

    assert np.array_equal(run(), run())


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(3)
    arrays = {
        "w": rng.standard_normal((3, 3, 2, 4)),
        "b": rng.standard_normal(4),
        "stats": np.array([np.pi, 1e-300]),
    }
    p = tmp_path / "m.ckpt"
    save_checkpoint(p, arrays)
    back = load_checkpoint(p)
    assert sorted(back) == sorted(arrays)
    for k in arrays:
        assert back[k].shape == arrays[k].shape
        assert np.array_equal(back[k].view(np.uint64), arrays[k].view(np.uint64))


def test_checkpoint_rewrite_is_byte_identical(tmp_path):
    arrays = {"x": np.arange(12.0).reshape(3, 4)}
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, arrays)
    save_checkpoint(b, arrays)
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rejects_bad_magic(tmp_path):
    p = tmp_path / "bad.ckpt"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_checkpoint(p)
