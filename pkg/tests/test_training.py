"""Training loop tests: config validation, prompt-mode plumbing, step
counting, seeded determinism, divergence handling, logs and checkpoints."""

import json
import math

import numpy as np
import pytest
import torch

from helpers import tiny_model
from promptseg.datasets import synth_dataset
from promptseg.errors import ConfigurationError, TrainingDiverged
from promptseg.losses import LossConfig, batch_loss_terms, total_loss
from promptseg.model import load_checkpoint, weights_fingerprint
from promptseg.training import (
    TrainConfig,
    bundle_for,
    fit,
    strip_text,
    tight_box,
    train_split_dsc,
)


@pytest.fixture(scope="module")
def tiny_manifest(tmp_path_factory):
    root = tmp_path_factory.mktemp("synth")
    return synth_dataset(4, 32, seed=3, root=root)


def quick_cfg(tmp_path, **overrides):
    defaults = dict(epochs=1, batch_size=4, learning_rate=1e-3, seed=0,
                    out_dir=str(tmp_path), run_name="t")
    defaults.update(overrides)
    return TrainConfig(**defaults)


# ---------------------------------------------------------------------------
# config validation

def test_train_config_rejects_bad_values():
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=-1)
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig(ablation="no_decoder")
    with pytest.raises(ConfigurationError):
        TrainConfig(prompt_mode_schedule={"box": 0.5})
    with pytest.raises(ConfigurationError):
        TrainConfig(prompt_mode_schedule={"box": 0.5, "laser": 0.5})
    with pytest.raises(ConfigurationError):
        TrainConfig(dtype="float16")


def test_default_schedule_is_uniform():
    cfg = TrainConfig()
    assert cfg.prompt_mode_schedule == {
        "box": 0.25, "text": 0.25, "box+text": 0.25, "silent+text": 0.25,
    }


# ---------------------------------------------------------------------------
# prompt plumbing

def test_tight_box_corners():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[5:11, 8:20] = 1
    box = tight_box(mask)
    assert (box.x0, box.y0, box.x1, box.y1) == (8.0, 5.0, 20.0, 11.0)


def test_tight_box_single_pixel_valid():
    mask = np.zeros((32, 32), dtype=np.uint8)
    mask[7, 9] = 1
    box = tight_box(mask)
    assert box.x1 > box.x0 and box.y1 > box.y0


def test_strip_text_mapping():
    assert strip_text("box+text") == "box"
    assert strip_text("text") == "silent"
    assert strip_text("silent+text") == "silent"
    assert strip_text("box") == "box"


def test_bundle_for_modes(tiny_manifest):
    s = tiny_manifest.load_samples("train")[0]
    assert bundle_for(s, "box").boxes is not None
    assert bundle_for(s, "box").text is None
    assert not bundle_for(s, "text").use_geometric
    b = bundle_for(s, "box+text")
    assert b.boxes and b.text == s.text_prompt
    silent = bundle_for(s, "silent+text")
    assert silent.use_geometric and silent.boxes is None and silent.text
    with pytest.raises(ConfigurationError):
        bundle_for(s, "laser")


# ---------------------------------------------------------------------------
# step counting and logs

def test_epochs_zero_means_no_steps_and_unchanged_weights(tiny_manifest, tmp_path):
    model = tiny_model(seed=1)
    before = weights_fingerprint(model)
    result = fit(model, tiny_manifest, quick_cfg(tmp_path, epochs=0))
    assert result.final_step == 0
    assert result.records == []
    assert weights_fingerprint(model) == before
    assert result.checkpoint_path.name == "ckpt_0"
    assert result.checkpoint_path.exists()


def test_step_count_is_epochs_times_ceil(tiny_manifest, tmp_path):
    # 2 train volumes x 2 shapes = 4 samples; batch 3 -> ceil(4/3) = 2 steps
    model = tiny_model(seed=1)
    result = fit(model, tiny_manifest, quick_cfg(tmp_path, epochs=2, batch_size=3))
    n = len(tiny_manifest.load_samples("train"))
    assert result.final_step == 2 * math.ceil(n / 3)


def test_single_sample_single_epoch_logs_one_step(tmp_path):
    manifest = synth_dataset(1, 32, seed=9, root=tmp_path / "data")
    # n=1 volume: floor(.7)=0 train, floor(.1)=0 val, 1 test volume
    model = tiny_model(seed=1)
    cfg = quick_cfg(tmp_path, epochs=1, batch_size=1)
    with pytest.raises(ConfigurationError):
        fit(model, manifest, cfg)  # train split is empty
    result = fit(model, manifest, cfg, split="test")
    assert result.final_step == 2  # one image gives two shape samples
    lines = result.log_path.read_text().splitlines()
    assert len(lines) == 2
    record = json.loads(lines[0])
    assert set(record) == {"step", "epoch", "loss", "dice_term", "bce_term",
                           "prompt_mode"}
    assert record["step"] == 1


def test_max_steps_caps_run(tiny_manifest, tmp_path):
    model = tiny_model(seed=1)
    result = fit(model, tiny_manifest, quick_cfg(tmp_path, epochs=50, max_steps=3))
    assert result.final_step == 3


def test_log_modes_come_from_schedule(tiny_manifest, tmp_path):
    model = tiny_model(seed=1)
    cfg = quick_cfg(tmp_path, epochs=6, batch_size=2,
                    prompt_mode_schedule={"box": 0.5, "box+text": 0.5})
    result = fit(model, tiny_manifest, cfg)
    modes = {r["prompt_mode"] for r in result.records}
    assert modes <= {"box", "box+text"}
    assert len(modes) == 2  # both get sampled over 12 steps


# ---------------------------------------------------------------------------
# determinism

def test_same_seed_reproduces_loss_curve_exactly(tiny_manifest, tmp_path):
    curves = []
    for run in ("a", "b"):
        model = tiny_model(seed=5)
        cfg = quick_cfg(tmp_path, epochs=2, run_name=run, dtype="float64",
                        seed=11)
        result = fit(model, tiny_manifest, cfg)
        curves.append([r["loss"] for r in result.records])
    assert curves[0] == curves[1]


def test_different_seed_changes_curve(tiny_manifest, tmp_path):
    curves = []
    for seed in (1, 2):
        model = tiny_model(seed=5)
        cfg = quick_cfg(tmp_path, epochs=2, run_name=f"s{seed}",
                        dtype="float64", seed=seed)
        result = fit(model, tiny_manifest, cfg)
        curves.append([r["loss"] for r in result.records])
    assert curves[0] != curves[1]


# ---------------------------------------------------------------------------
# ablation switches

def test_no_multiscale_flips_encoder_mode(tiny_manifest, tmp_path):
    model = tiny_model(seed=1)
    assert model.image_encoder.cfg.multi_feature
    fit(model, tiny_manifest, quick_cfg(tmp_path, ablation="no_multiscale"))
    assert not model.image_encoder.cfg.multi_feature


def test_no_text_strips_text_modes(tiny_manifest, tmp_path):
    model = tiny_model(seed=1)
    cfg = quick_cfg(tmp_path, epochs=4, ablation="no_text")
    result = fit(model, tiny_manifest, cfg)
    assert {r["prompt_mode"] for r in result.records} <= {"box", "silent"}


# ---------------------------------------------------------------------------
# divergence

def test_non_finite_loss_aborts_with_diagnostics(tiny_manifest, tmp_path):
    model = tiny_model(seed=1)
    with torch.no_grad():
        model.mask_decoder.logit_bias.fill_(float("nan"))
    with pytest.raises(TrainingDiverged) as exc:
        fit(model, tiny_manifest, quick_cfg(tmp_path))
    assert exc.value.step == 1
    assert len(exc.value.batch_ids) >= 1
    assert all(isinstance(v, str) for v in exc.value.batch_ids)


# ---------------------------------------------------------------------------
# checkpoints and early stop

def test_periodic_and_final_checkpoints_load(tiny_manifest, tmp_path):
    model = tiny_model(seed=1)
    cfg = quick_cfg(tmp_path, epochs=2, batch_size=2, checkpoint_every=2)
    result = fit(model, tiny_manifest, cfg)
    assert (tmp_path / "t" / "ckpt_2").exists()
    loaded, extra = load_checkpoint(result.checkpoint_path)
    assert extra["step"] == result.final_step
    assert weights_fingerprint(loaded) == weights_fingerprint(model)


def test_early_stop_on_train_dsc(tiny_manifest, tmp_path):
    model = tiny_model(seed=1)
    cfg = quick_cfg(tmp_path, epochs=50, eval_every=1,
                    early_stop_train_dsc=0.0)  # any DSC passes immediately
    result = fit(model, tiny_manifest, cfg)
    assert result.stopped_early
    assert result.final_step == 1
    assert result.final_train_dsc is not None


def test_train_split_dsc_range(tiny_manifest):
    model = tiny_model(seed=1)
    val = train_split_dsc(model, tiny_manifest.load_samples("train"))
    assert 0.0 <= val <= 1.0


# ---------------------------------------------------------------------------
# batched loss helper

def test_batch_loss_matches_per_sample_mean():
    gen = torch.Generator().manual_seed(8)
    probs = torch.rand(5, 16, 16, generator=gen, dtype=torch.float64)
    target = (torch.rand(5, 16, 16, generator=gen) < 0.3).double()
    cfg = LossConfig(lambda1=0.7, lambda2=1.3)
    total, _, _ = batch_loss_terms(probs, target, cfg)
    per_sample = torch.stack([total_loss(probs[i], target[i], cfg)
                              for i in range(5)]).mean()
    assert torch.allclose(total, per_sample, rtol=1e-12, atol=1e-12)
