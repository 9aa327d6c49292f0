"""Orchestration: padding, config parsing, stages, manifest, CLI."""

import shutil

import numpy as np
import pytest

from dytex import imagery
from dytex.cli import main as cli_main
from dytex.config import load_config
from dytex.errors import ConfigError, DytexError, NeedSubsequentFramesError, StageError
from dytex.patch_grid import PatchSpec
from dytex.pipeline import (evaluate, pad_to_grid, read_manifest, run_stage,
                            run_transfer)


# ------------------------------------------------------------------
# pad_to_grid
# ------------------------------------------------------------------

def test_pad_already_valid_is_identity():
    img = np.random.default_rng(0).random((18, 18, 3))
    out, crop = pad_to_grid(img, PatchSpec(16, 1))
    assert out.shape == img.shape
    assert np.array_equal(out, img)
    assert (crop.height, crop.width) == (18, 18)


def test_pad_17x17_p16_s2_becomes_18x18():
    img = np.zeros((17, 17, 1))
    out, crop = pad_to_grid(img, PatchSpec(16, 2))
    assert out.shape == (18, 18, 1)
    assert (crop.height, crop.width) == (17, 17)


def test_pad_crop_roundtrip_is_identity():
    rng = np.random.default_rng(1)
    img = rng.random((21, 27, 3))
    out, crop = pad_to_grid(img, PatchSpec(16, 4))
    assert np.array_equal(crop.crop(out), img)


def test_pad_smaller_than_patch_grows_to_patch():
    img = np.zeros((9, 40))
    out, _ = pad_to_grid(img, PatchSpec(16, 4))
    assert out.shape == (16, 40)


def test_pad_reflects_content():
    img = np.arange(17 * 17, dtype=np.float64).reshape(17, 17)
    out, _ = pad_to_grid(img, PatchSpec(16, 2))
    assert out[17, 5] == img[15, 5]  # reflect over the last row


# ------------------------------------------------------------------
# config parsing
# ------------------------------------------------------------------

def write_cfg(tmp_path, body):
    p = tmp_path / "c.cfg"
    p.write_text(body, encoding="utf-8")
    return p


MINIMAL = """\
[paths]
source_video = src
source_mask = a.png
target_mask = b.png
output = out
"""


def test_config_defaults(tmp_path):
    cfg = load_config(write_cfg(tmp_path, MINIMAL), validate=False)
    assert cfg.patches.patch_size == 16
    assert cfg.patches.stride == 4
    assert cfg.merge.sigma == 4.0
    assert cfg.vqvae_model.codebook_size == 256
    assert cfg.vqvae_model.embed_dim == 64
    assert cfg.vqvae_model.beta == 0.25
    assert cfg.forecaster_model.layers == 6
    assert cfg.forecaster_model.heads == 8
    assert cfg.forecaster_model.d_model == 128
    assert cfg.forecaster_train.lr == 2.5e-6
    assert cfg.forecaster_train.batch_size == 32
    assert cfg.vqvae_train.batch_size == 32
    assert cfg.patchmatch.patch_size == 16
    assert cfg.patchmatch.iterations == 5


def test_config_seed_derives_stage_seeds(tmp_path):
    cfg = load_config(write_cfg(tmp_path, MINIMAL + "\n[run]\nseed = 41\n"),
                      validate=False)
    assert cfg.seed == 41
    assert cfg.patchmatch.rng_seed == 41
    assert cfg.vqvae_train.seed == 42
    assert cfg.forecaster_train.seed == 43
    assert cfg.sampler.rng_seed == 44


def test_config_unknown_section_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown section"):
        load_config(write_cfg(tmp_path, MINIMAL + "\n[typo]\nx = 1\n"), validate=False)


def test_config_unknown_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="unknown key"):
        load_config(write_cfg(tmp_path, MINIMAL + "\n[merge]\nsgima = 4\n"), validate=False)


def test_config_bad_value_rejected(tmp_path):
    with pytest.raises(ConfigError, match="cannot parse"):
        load_config(write_cfg(tmp_path, MINIMAL + "\n[vqvae]\nsteps = soon\n"),
                    validate=False)


def test_config_missing_path_key_rejected(tmp_path):
    with pytest.raises(ConfigError, match="must define"):
        load_config(write_cfg(tmp_path, "[paths]\nsource_video = s\n"), validate=False)


def test_config_missing_file_rejected(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(tmp_path / "nope.cfg")


def test_config_validates_paths(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        load_config(write_cfg(tmp_path, MINIMAL))  # assets absent


def test_config_invalid_domain_value(tmp_path):
    with pytest.raises(ConfigError):
        load_config(write_cfg(tmp_path, MINIMAL + "\n[run]\npadding = wrap\n"),
                    validate=False)


# ------------------------------------------------------------------
# full run behavior (mini assets)
# ------------------------------------------------------------------

def test_run_output_shape_and_manifest(mini_run):
    cfg, frames, manifest = mini_run
    assert frames.shape == (4, 32, 32, 3)  # frame count and target dims preserved
    entries = read_manifest(manifest)
    assert entries["status"] == "ok"
    assert "metric.nnf_mean_cost" in entries
    assert "metric.vqvae_holdout_mse" in entries
    assert "metric.forecaster_accuracy" in entries
    assert "digest.frame_0000.png" in entries
    assert "config.run.seed" in entries


def test_single_frame_source_rejected(tmp_path):
    imagery.save_frame_sequence(tmp_path / "src", np.zeros((1, 32, 32, 3)))
    imagery.save_mask(tmp_path / "a.png", np.ones((32, 32), np.uint8))
    imagery.save_mask(tmp_path / "b.png", np.ones((32, 32), np.uint8))
    body = MINIMAL.replace("source_video = src", "source_video = src") \
        .replace("a.png", "a.png").replace("b.png", "b.png")
    cfg = load_config(write_cfg(tmp_path, body), validate=False)
    with pytest.raises(NeedSubsequentFramesError):
        run_transfer(cfg)


def test_stage_rerun_reproduces_merge_outputs(mini_run, mini_assets):
    cfg, _, _ = mini_run
    frames_dir = cfg.output / "frames"
    before = {p.name: p.read_bytes() for p in frames_dir.glob("frame_*.png")}
    run_stage("merge", cfg)  # consumes only earlier-stage artifacts
    after = {p.name: p.read_bytes() for p in frames_dir.glob("frame_*.png")}
    assert before == after


def test_stage_rerun_reproduces_predictions(mini_run):
    cfg, _, _ = mini_run
    token_path = cfg.output / "tokens_predicted.dxtk"
    before = token_path.read_bytes()
    run_stage("predict", cfg)
    assert token_path.read_bytes() == before


def test_evaluate_reports_all_metrics(mini_run):
    cfg, _, _ = mini_run
    report = evaluate(cfg)
    lines = report.lines()
    assert len(lines) == 5
    assert np.isfinite(report.vqvae_holdout_mse)
    assert np.isfinite(report.forecaster_accuracy)
    assert np.isfinite(report.nnf_mean_cost)


def test_evaluate_missing_artifacts(tmp_path):
    body = MINIMAL.replace("output = out", "output = empty_out")
    cfg = load_config(write_cfg(tmp_path, body), validate=False)
    (tmp_path / "empty_out").mkdir()
    with pytest.raises(DytexError, match="missing artifact"):
        evaluate(cfg)


def test_failed_stage_writes_flagged_manifest(tmp_path):
    # break stage 3+ by corrupting the source video after stage 1 inputs exist
    imagery.save_frame_sequence(tmp_path / "src", np.zeros((2, 8, 8, 3)))  # too small to patch
    imagery.save_mask(tmp_path / "a.png", np.ones((8, 8), np.uint8))
    imagery.save_mask(tmp_path / "b.png", np.ones((8, 8), np.uint8))
    cfg = load_config(write_cfg(tmp_path, MINIMAL), validate=False)
    with pytest.raises(StageError) as err:
        run_transfer(cfg)
    assert err.value.stage
    entries = read_manifest(cfg.output / "manifest.txt")
    assert entries["status"] == "failed"
    assert entries["failed_stage"] == err.value.stage


# ------------------------------------------------------------------
# CLI
# ------------------------------------------------------------------

def test_cli_config_error_exit_code(tmp_path):
    bad = write_cfg(tmp_path, MINIMAL + "\n[typo]\nx = 1\n")
    assert cli_main(["--config", str(bad), "run"]) == 2


def test_cli_missing_config_exit_code(tmp_path):
    assert cli_main(["--config", str(tmp_path / "none.cfg"), "run"]) == 2


def test_cli_stage_failure_exit_code(tmp_path):
    imagery.save_frame_sequence(tmp_path / "src", np.zeros((2, 8, 8, 3)))
    imagery.save_mask(tmp_path / "a.png", np.ones((8, 8), np.uint8))
    imagery.save_mask(tmp_path / "b.png", np.ones((8, 8), np.uint8))
    cfg_path = write_cfg(tmp_path, MINIMAL)
    assert cli_main(["--config", str(cfg_path), "run"]) == 3


def test_cli_eval_and_stage_commands(mini_assets, mini_run, capsys):
    cfg_path = mini_assets / "run.cfg"
    assert cli_main(["--config", str(cfg_path), "eval"]) == 0
    out = capsys.readouterr().out
    assert "forecaster_validation_accuracy" in out
    assert cli_main(["--config", str(cfg_path), "distance-map"]) == 0


def test_cli_invalid_threads(tmp_path):
    cfg_path = write_cfg(tmp_path, MINIMAL)
    assert cli_main(["--config", str(cfg_path), "--threads", "0", "run"]) == 2
