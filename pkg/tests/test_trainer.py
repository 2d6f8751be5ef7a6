"""Training orchestration: schedules, determinism, stages, run directories."""

import csv
import json
import math

import numpy as np
import pytest
import torch

from concealdet.data import AugmentConfig, BoundingBox, ImageSample, SynthConfig
from concealdet.isr import WeightTable
from concealdet.model import ModelConfig, build_detector
from concealdet.trainer import (
    LOSS_LOG_FIELDS,
    TrainConfig,
    TrainingError,
    cosine_lr,
    desk_preset,
    desk_synth_config,
    evaluate_by_size,
    hp_stage_sweep,
    paper_preset,
    predict_dataset,
    run_pipeline,
    run_pipeline_synthetic,
    time_inference,
    train_stage1,
    train_stage2,
)

SMALL = ModelConfig(backbone_channels=(8, 16, 24, 32), fpn_channels=16)


def _tiny_cfg(**overrides):
    base = dict(
        epochs=2, batch_size=4, lr=1e-3, seed=0, image_size=64,
        model=SMALL, augment=AugmentConfig(out_size=64),
    )
    base.update(overrides)
    return TrainConfig(**base)


def _all_alpha(train_set, alpha):
    return WeightTable({s.id: (1.0 - alpha, alpha) for s in train_set})


# ---------------------------------------------------------------------------
# schedule and config plumbing
# ---------------------------------------------------------------------------

def test_cosine_schedule_endpoints_exact():
    assert cosine_lr(0, 100, 2e-3, 1e-4) == 2e-3
    assert cosine_lr(99, 100, 2e-3, 1e-4) == 1e-4
    assert cosine_lr(0, 1, 5e-4) == 5e-4  # degenerate single-step schedule


def test_cosine_schedule_midpoint_and_monotone():
    assert cosine_lr(50, 101, 1e-2, 2e-3) == pytest.approx(6e-3)
    values = [cosine_lr(s, 40, 1e-3, 1e-5) for s in range(40)]
    assert all(b < a for a, b in zip(values, values[1:]))


def test_train_config_round_trip():
    cfg = _tiny_cfg(lr_floor=1e-5, weight_floor=0.1, use_bcl=False)
    assert TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg


@pytest.mark.parametrize(
    "overrides",
    [dict(epochs=0), dict(stage2_epochs=0), dict(batch_size=1),
     dict(lr=0.0), dict(lr_floor=2.0), dict(image_size=48)],
)
def test_train_config_rejects_bad_values(overrides):
    with pytest.raises(ValueError):
        _tiny_cfg(**overrides)


def test_train_config_requires_matching_augment_size():
    with pytest.raises(ValueError, match="out_size"):
        _tiny_cfg(augment=AugmentConfig(out_size=128))


def test_presets():
    desk = desk_preset(seed=4)
    assert desk.seed == 4 and desk.image_size == 128
    paper = paper_preset()
    assert paper.image_size == 512
    assert paper.batch_size == 16
    assert paper.lr == 1e-4
    synth = desk_synth_config()
    assert (synth.image_size, synth.n_train, synth.n_test) == (128, 64, 16)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------

def test_stage1_deterministic_bitwise(tiny_synth):
    _, train, _ = tiny_synth
    cfg = _tiny_cfg()
    model_a, rows_a = train_stage1(cfg, train)
    model_b, rows_b = train_stage1(cfg, train)
    state_a, state_b = model_a.state_dict(), model_b.state_dict()
    assert state_a.keys() == state_b.keys()
    for key in state_a:
        assert torch.equal(state_a[key], state_b[key]), key
    assert rows_a == rows_b


def test_stage1_rejects_empty_training_set():
    with pytest.raises(ValueError):
        train_stage1(_tiny_cfg(), [])


def test_loss_log_schedule_and_shape(tiny_synth):
    _, train, _ = tiny_synth
    cfg = _tiny_cfg(epochs=3, batch_size=4, lr_floor=1e-5)
    _, rows = train_stage1(cfg, train)
    steps_per_epoch = math.ceil(len(train) / cfg.batch_size)
    assert len(rows) == cfg.epochs * steps_per_epoch
    assert set(rows[0]) == set(LOSS_LOG_FIELDS)
    assert rows[0]["lr"] == cfg.lr
    assert rows[-1]["lr"] == cfg.lr_floor  # cosine lands exactly on the floor
    assert all(row["stage"] == 1 for row in rows)


def test_loss_decreases_with_training(tiny_synth):
    _, train, _ = tiny_synth
    cfg = _tiny_cfg(epochs=60, batch_size=4, lr=3e-3, use_bcl=False)
    _, rows = train_stage1(cfg, train)
    first = np.mean([r["total"] for r in rows[:5]])
    last = np.mean([r["total"] for r in rows[-5:]])
    assert last < 0.6 * first


def test_zero_alpha_stage2_keeps_parameters(tiny_synth):
    _, train, _ = tiny_synth
    cfg = _tiny_cfg(epochs=1)
    model = build_detector(cfg.model, seed=1)
    before = {k: v.clone() for k, v in model.named_parameters()}
    buffers_before = {k: v.clone() for k, v in model.named_buffers()}
    train_stage2(cfg, train, _all_alpha(train, 0.0), model)
    for key, param in model.named_parameters():
        assert torch.equal(param, before[key]), key
    # normalization statistics still track the batches even at zero weight
    assert any(
        not torch.equal(buf, buffers_before[k]) for k, buf in model.named_buffers()
    )


def test_unit_alpha_stage2_replays_stage1(tiny_synth):
    """With every weight at 1 and no contrastive term, fine-tuning from a fresh
    model is the same optimization as the first stage, bit for bit."""
    _, train, _ = tiny_synth
    cfg = _tiny_cfg(use_bcl=False)
    stage1_model, _ = train_stage1(cfg, train)
    fresh = build_detector(cfg.model, seed=cfg.seed)
    stage2_model, _ = train_stage2(cfg, train, _all_alpha(train, 1.0), fresh)
    state1, state2 = stage1_model.state_dict(), stage2_model.state_dict()
    for key in state1:
        assert torch.equal(state1[key], state2[key]), key


def test_stage2_requires_full_weight_coverage(tiny_synth):
    _, train, _ = tiny_synth
    cfg = _tiny_cfg()
    model = build_detector(cfg.model, seed=0)
    table = _all_alpha(train[1:], 1.0)
    with pytest.raises(KeyError, match=train[0].id):
        train_stage2(cfg, train, table, model)


def test_stage2_epochs_override(tiny_synth):
    _, train, _ = tiny_synth
    cfg = _tiny_cfg(epochs=2, stage2_epochs=1)
    model = build_detector(cfg.model, seed=0)
    _, rows = train_stage2(cfg, train, _all_alpha(train, 1.0), model)
    assert len(rows) == math.ceil(len(train) / cfg.batch_size)
    assert all(row["stage"] == 2 for row in rows)


def test_non_finite_loss_reports_batch(tiny_synth):
    _, train, _ = tiny_synth
    cfg = _tiny_cfg(epochs=1)
    model = build_detector(cfg.model, seed=0)
    with torch.no_grad():
        next(model.parameters()).fill_(float("nan"))
    with pytest.raises(TrainingError, match="non-finite .* batch ids"):
        train_stage2(cfg, train, _all_alpha(train, 1.0), model)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------

def test_predict_dataset_covers_ids(tiny_synth):
    _, _, test = tiny_synth
    cfg = _tiny_cfg()
    model = build_detector(cfg.model, seed=0).eval()
    preds, gt = predict_dataset(model, test, cfg)
    assert set(preds) == set(gt) == {s.id for s in test}
    for sample in test:
        assert len(gt[sample.id]) == len(sample.boxes)


def _blind_model():
    model = build_detector(SMALL, seed=0)
    for p in model.parameters():
        torch.nn.init.zeros_(p)
    return model.eval()


def test_evaluate_by_size_bins_by_area_ratio():
    pixels = np.zeros((64, 64, 3), dtype=np.float32)
    samples = [
        ImageSample("tiny", pixels, [BoundingBox(0, 0, 10, 10)]),     # 2.4%
        ImageSample("mid", pixels, [BoundingBox(0, 0, 25, 25)]),      # 15.3%
        ImageSample("empty", pixels, []),                             # skipped
    ]
    cfg = _tiny_cfg(score_threshold=0.9)
    table = evaluate_by_size(_blind_model(), samples, cfg)
    assert set(table) == {"(0.0,0.1]", "(0.1,0.2]"}
    for row in table.values():
        assert row["n_images"] == 1
        assert row["f1"] == 0.0


def test_time_inference_positive():
    cfg = _tiny_cfg()
    seconds = time_inference(_blind_model(), cfg, n_images=2, repeats=2)
    assert seconds > 0


# ---------------------------------------------------------------------------
# pipeline runs
# ---------------------------------------------------------------------------

def test_run_pipeline_directory_layout(tiny_synth, tmp_path):
    _, train, test = tiny_synth
    cfg = _tiny_cfg(epochs=1)
    manifest = run_pipeline(cfg, train[:4], test[:2], tmp_path / "run")
    out = tmp_path / "run"
    for name in ("config.json", "stage1.ckpt", "weights.table", "stage2.ckpt",
                 "loss_log.csv", "eval.json", "eval_by_size.json",
                 "manifest.json", "losses_stage1.json", "losses_stage2.json"):
        assert (out / name).exists(), name
    assert manifest.final_checkpoint == "stage2.ckpt"
    saved = json.loads((out / "manifest.json").read_text())
    assert saved["config_hash"] == manifest.config_hash
    assert saved["eval_result"] == manifest.eval_result
    with open(out / "loss_log.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOSS_LOG_FIELDS
    assert {row["stage"] for row in rows} == {"1", "2"}


def test_run_pipeline_stage1_only(tiny_synth, tmp_path):
    _, train, test = tiny_synth
    cfg = _tiny_cfg(epochs=1, run_stage2=False)
    manifest = run_pipeline(cfg, train[:4], test[:2], tmp_path / "run")
    assert manifest.final_checkpoint == "stage1.ckpt"
    assert manifest.weight_table is None
    assert not (tmp_path / "run" / "stage2.ckpt").exists()


def test_run_pipeline_synthetic_persists_dataset(tmp_path):
    cfg = _tiny_cfg(epochs=1)
    synth = SynthConfig(image_size=64, n_train=4, n_test=2, texture_seed=5)
    manifest = run_pipeline_synthetic(cfg, synth, tmp_path / "run")
    data = tmp_path / "run" / "data"
    assert (data / "train.json").exists()
    assert (data / "test.json").exists()
    assert (data / "manifest.json").exists()
    assert "f1" in manifest.eval_result


def test_hp_stage_sweep_row_shape(tiny_synth, tmp_path):
    _, train, test = tiny_synth
    cfg = _tiny_cfg(epochs=1)
    rows = hp_stage_sweep(cfg, train[:4], test[:2], tmp_path / "sweep", stages=(1,))
    assert len(rows) == 1
    assert set(rows[0]) == {"n_stages", "f1", "ap", "seconds_per_image"}
    assert (tmp_path / "sweep" / "stage_sweep.json").exists()
