"""Command-line interface: subcommands, exit codes, artifacts."""

import filecmp
from pathlib import Path

import numpy as np
import pytest

from deepsum.checkpoint import load_checkpoint
from deepsum.cli import EXIT_CONFIG, EXIT_DATA, EXIT_OK, main
from deepsum.datagen import load_scene
from deepsum.imaging import load_image16
from deepsum.model import ModelConfig, init_model_params, set_params_arrays
from deepsum.training import SlidingConfig, TrainConfig, sliding_window_infer


def tiny_model_text():
    return ModelConfig(features=4, regnet_first_channels=8,
                       sisrnet_layers=2, regnet_2d_layers=2).to_text()


def stage_cfg_text(stage, epochs=1):
    return TrainConfig(stage=stage, epochs=epochs, lr=1e-3, batch_size=8,
                       seed=0, val_every=1).to_text()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Tiny end-to-end CLI run: data, three stages, inference, scoring."""
    root = tmp_path_factory.mktemp("cli")
    data = root / "data"
    run = root / "run"
    assert main(["gen-data", "--out", str(data), "--scenes", "4",
                 "--seed", "0"]) == EXIT_OK

    (root / "model.cfg").write_text(tiny_model_text())
    for stage, name in (("sisr", "sisr_pretrain"),
                        ("regnet", "regnet_pretrain"),
                        ("e2e", "end_to_end")):
        cfg = root / f"{stage}.cfg"
        cfg.write_text(stage_cfg_text(name))
        cmd = ["train", "--stage", stage, "--data", str(data),
               "--out", str(run), "--config", str(cfg),
               "--model-config", str(root / "model.cfg"),
               "--regnet-items", "10", "--regnet-crop", "18"]
        assert main(cmd) == EXIT_OK, stage

    scene = sorted(d for d in data.iterdir() if d.is_dir())[0]
    sr = root / "sr.png"
    assert main(["infer", "--model", str(run), "--scene", str(scene),
                 "--out", str(sr)]) == EXIT_OK
    return {"root": root, "data": data, "run": run, "scene": scene, "sr": sr}


def test_gen_data_layout(workspace):
    data = workspace["data"]
    dirs = sorted(d.name for d in data.iterdir() if d.is_dir())
    assert dirs == [f"scene_{i:03d}" for i in range(4)]
    for d in data.iterdir():
        if not d.is_dir():
            continue
        n = len(list(d.glob("LR*.png")))
        assert 9 <= n <= 13
        assert len(list(d.glob("QM*.png"))) == n
        assert (d / "HR.png").exists() and (d / "truth.txt").exists()
    assert (data / "run_manifest.txt").exists()


def test_gen_data_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert main(["gen-data", "--out", str(out), "--scenes", "2",
                     "--seed", "5"]) == EXIT_OK
    for pa in sorted(a.rglob("*.png")):
        pb = b / pa.relative_to(a)
        assert filecmp.cmp(pa, pb, shallow=False), pa


def test_gen_data_bad_hr_size(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x"), "--scenes", "1",
                 "--hr-size", "47"]) == EXIT_CONFIG


def test_unknown_arguments_exit_config(tmp_path):
    assert main(["gen-data", "--out", str(tmp_path / "x"),
                 "--bogus"]) == EXIT_CONFIG
    assert main([]) == EXIT_CONFIG


def test_train_artifacts(workspace):
    run = workspace["run"]
    for name in ("sisr.ckpt", "regnet.ckpt", "e2e.ckpt", "model.cfg",
                 "run_manifest.txt", "train_end_to_end.log"):
        assert (run / name).exists(), name


def test_train_missing_prerequisite_names_stage(tmp_path, workspace, capsys):
    cfg = tmp_path / "e2e.cfg"
    cfg.write_text(stage_cfg_text("end_to_end"))
    code = main(["train", "--stage", "e2e", "--data", str(workspace["data"]),
                 "--out", str(tmp_path / "fresh"), "--config", str(cfg),
                 "--model-config", str(workspace["root"] / "model.cfg")])
    assert code == EXIT_DATA
    assert "regnet_pretrain" in capsys.readouterr().err


def test_train_missing_data(tmp_path, workspace):
    cfg = tmp_path / "s.cfg"
    cfg.write_text(stage_cfg_text("sisr_pretrain"))
    assert main(["train", "--stage", "sisr", "--data", str(tmp_path / "none"),
                 "--out", str(tmp_path / "o"), "--config", str(cfg)]) == EXIT_DATA


def test_infer_output_matches_library(workspace):
    sr = load_image16(workspace["sr"])
    cfg = ModelConfig.from_text((workspace["run"] / "model.cfg").read_text())
    params = init_model_params(cfg, seed=0)
    set_params_arrays(params, load_checkpoint(workspace["run"] / "e2e.ckpt"))
    scene = load_scene(workspace["scene"])
    want, _ = sliding_window_infer(scene, params, cfg,
                                   SlidingConfig(window=cfg.n_images, num_estimates=1))
    assert np.array_equal(sr, np.clip(np.rint(want), 0, 65535))


def test_infer_sliding_changes_result(workspace, tmp_path):
    # pick a scene with spare acquisitions so extra windows exist
    data = workspace["data"]
    scene = next(d for d in sorted(data.iterdir())
                 if d.is_dir() and len(list(d.glob("LR*.png"))) >= 11)
    single = tmp_path / "one.png"
    multi = tmp_path / "many.png"
    assert main(["infer", "--model", str(workspace["run"]), "--scene",
                 str(scene), "--out", str(single)]) == EXIT_OK
    assert main(["infer", "--model", str(workspace["run"]), "--scene",
                 str(scene), "--out", str(multi), "--sliding", "3"]) == EXIT_OK
    assert not np.array_equal(load_image16(single), load_image16(multi))


def test_infer_missing_model(tmp_path, workspace):
    assert main(["infer", "--model", str(tmp_path / "none"),
                 "--scene", str(workspace["scene"]),
                 "--out", str(tmp_path / "x.png")]) == EXIT_DATA


def test_eval_perfect_reconstruction(workspace, tmp_path, capsys):
    scene = workspace["scene"]
    report = tmp_path / "report.txt"
    assert main(["eval", "--pred", str(scene / "HR.png"),
                 "--truth", str(scene), "--out", str(report)]) == EXIT_OK
    text = report.read_text()
    assert "mpsnr_db = 120.00" in text
    assert "ssim = 1.0000" in text


def test_eval_scores_reconstruction(workspace, capsys):
    assert main(["eval", "--pred", str(workspace["sr"]),
                 "--truth", str(workspace["scene"])]) == EXIT_OK
    out = capsys.readouterr().out
    val = float(next(l.split("=")[1] for l in out.splitlines()
                     if l.startswith("mpsnr_db")))
    assert 10.0 < val < 120.0


def test_eval_shape_mismatch(workspace, tmp_path):
    lr = next(workspace["scene"].glob("LR*.png"))
    assert main(["eval", "--pred", str(lr),
                 "--truth", str(workspace["scene"])]) == EXIT_DATA


def test_baseline_methods(workspace, tmp_path):
    scene = workspace["scene"]
    hr = load_image16(scene / "HR.png")
    for method in ("bicubic", "bicubic-mean"):
        out = tmp_path / f"{method}.png"
        assert main(["baseline", "--method", method, "--scene", str(scene),
                     "--out", str(out)]) == EXIT_OK
        assert load_image16(out).shape == hr.shape
    out = tmp_path / "sisr.png"
    assert main(["baseline", "--method", "sisr", "--scene", str(scene),
                 "--out", str(out), "--model", str(workspace["run"])]) == EXIT_OK
    assert load_image16(out).shape == hr.shape


def test_baseline_sisr_requires_model(workspace, tmp_path):
    assert main(["baseline", "--method", "sisr", "--scene",
                 str(workspace["scene"]),
                 "--out", str(tmp_path / "x.png")]) == EXIT_CONFIG


def test_resume_continues_epoch_numbering(workspace, tmp_path):
    run = workspace["run"]
    cfg = tmp_path / "more.cfg"
    cfg.write_text(stage_cfg_text("end_to_end", epochs=2))
    assert main(["train", "--stage", "e2e", "--data", str(workspace["data"]),
                 "--out", str(run), "--config", str(cfg), "--resume"]) == EXIT_OK
    log = (run / "train_end_to_end.log").read_text()
    assert "epoch=1" in log  # continued past the original single epoch


def test_run_manifest_contents(workspace):
    text = (workspace["run"] / "run_manifest.txt").read_text()
    assert "command = train" in text
    assert "run_id = " in text
    assert "arg.stage=e2e" in text
