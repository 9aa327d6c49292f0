"""Shared fixtures: a miniature transfer problem and one completed run."""

import numpy as np
import pytest

from dytex import imagery
from dytex.config import load_config

from synth import glyph_mask, style_video

MINI_CONFIG = """\
[paths]
source_video = source
source_mask = source_mask.png
target_mask = target_mask.png
output = out

[patches]
patch_size = 16
stride = 8

[patchmatch]
iterations = 4

[vqvae]
steps = 60
lr = 1e-3
batch_size = 8

[forecaster]
steps = 40
lr = 1e-3
warmup_steps = 10
batch_size = 4
eval_every = 10

[run]
seed = 0
"""


@pytest.fixture(scope="session")
def mini_assets(tmp_path_factory):
    """A 4-frame 32x32 source video with masks and a small-budget config."""
    root = tmp_path_factory.mktemp("mini")
    src_mask = glyph_mask(32, 32, seed=1)
    tgt_mask = glyph_mask(32, 32, seed=2)
    imagery.save_frame_sequence(root / "source", style_video(src_mask, 4, seed=3))
    imagery.save_mask(root / "source_mask.png", src_mask)
    imagery.save_mask(root / "target_mask.png", tgt_mask)
    (root / "run.cfg").write_text(MINI_CONFIG, encoding="utf-8")
    return root


@pytest.fixture(scope="session")
def mini_run(mini_assets):
    """One completed full run over the mini assets."""
    from dytex.pipeline import run_transfer
    cfg = load_config(mini_assets / "run.cfg")
    frames, manifest = run_transfer(cfg)
    return cfg, frames, manifest
