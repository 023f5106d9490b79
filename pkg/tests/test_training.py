import json
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

import spermsdf.training as training
from spermsdf.models import ModelConfig, Variant, build_model
from spermsdf.training import (
    AugmentDraw,
    EarlyStopping,
    LeakageError,
    SampleSet,
    TrainConfig,
    augment,
    bce_loss,
    evaluate_loss,
    fit,
    lr_at,
    overfit_sanity,
    read_epoch_logs,
)

CFG = TrainConfig()


def feature_samples(n, prefix, seed=0, separable=True, patients=None):
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % 2).astype(np.float32)
    feats = rng.normal(size=(n, 7)).astype(np.float32)
    if separable:
        feats[:, 0] += np.where(labels == 1, 2.5, -2.5)
    pids = patients or [f"{prefix}{i % 3}" for i in range(n)]
    return SampleSet([f"{prefix}-{i}" for i in range(n)], pids, labels, None, feats)


def image_samples(n, prefix, seed=0):
    rng = np.random.default_rng(seed)
    labels = (np.arange(n) % 2).astype(np.float32)
    images = rng.uniform(0.6, 0.8, size=(n, 64, 64)).astype(np.float32)
    images[labels == 1, 20:44, 20:44] = 0.1
    feats = rng.normal(size=(n, 7)).astype(np.float32)
    return SampleSet([f"{prefix}-{i}" for i in range(n)], [f"{prefix}{i % 2}" for i in range(n)],
                     labels, images, feats)


def morph_model(seed=0):
    return build_model(ModelConfig(variant=Variant.MORPHOLOGY), seed=seed)


# learning-rate schedule

@pytest.mark.parametrize("k,expected", [(0, 5e-5), (1, 6e-6), (2, 7.2e-7)])
def test_lr_after_warmup(k, expected):
    assert lr_at(50, 100, k, CFG) == pytest.approx(expected, rel=1e-12)
    assert lr_at(100, 100, k, CFG) == pytest.approx(expected, rel=1e-12)


def test_lr_warmup_examples():
    assert all(lr_at(0, 100, k, CFG) == 0.0 for k in range(6))
    assert lr_at(5, 100, 0, CFG) == pytest.approx(2.5e-5, rel=1e-12)
    assert lr_at(10, 100, 0, CFG) == 5e-5


def test_lr_rejects_out_of_range():
    with pytest.raises(ValueError):
        lr_at(101, 100, 0, CFG)
    with pytest.raises(ValueError):
        lr_at(1, 100, -1, CFG)


@given(st.integers(10, 5000), st.integers(0, 6))
@settings(max_examples=60)
def test_lr_monotone_then_constant(total, k):
    rates = [lr_at(s, total, k, CFG) for s in range(total + 1)]
    warm = math.ceil(0.1 * total)
    assert all(b >= a for a, b in zip(rates[:warm], rates[1:warm + 1]))
    assert len(set(rates[warm:])) == 1


# augmentation

def test_identity_draw_returns_image():
    img = np.random.default_rng(0).random((32, 32))
    out, label = augment(img, 1, np.random.default_rng(0), draw=AugmentDraw())
    np.testing.assert_array_equal(out, img)
    assert label == 1


def test_horizontal_flip_is_involution():
    img = np.random.default_rng(0).random((32, 40))
    draw = AugmentDraw(hflip=True)
    once, _ = augment(img, 0, None, draw=draw)
    twice, _ = augment(once, 0, None, draw=draw)
    assert not np.array_equal(once, img)
    np.testing.assert_array_equal(twice, img)


def test_rotation_fills_with_border_median():
    img = np.full((33, 33), 0.8, dtype=np.float32)
    img[10:23, 10:23] = 0.1
    out, _ = augment(img, 0, None, draw=AugmentDraw(angle=45.0))
    assert out[0, 0] == pytest.approx(0.8, abs=1e-6)


@given(seed=st.integers(0, 10_000), label=st.sampled_from([0, 1]), h=st.integers(8, 48), w=st.integers(8, 48))
@settings(max_examples=50, deadline=None)
def test_augmentation_preserves_label_shape_dtype(seed, label, h, w):
    img = np.random.default_rng(seed).random((h, w)).astype(np.float32)
    out, lab = augment(img, label, np.random.default_rng(seed))
    assert lab == label
    assert out.shape == img.shape and out.dtype == img.dtype


def test_draws_cover_configured_ranges():
    rng = np.random.default_rng(0)
    draws = [training.draw_augmentation(rng) for _ in range(2000)]
    angles = np.array([d.angle for d in draws])
    assert angles.min() < -170 and angles.max() > 170
    assert 0.45 < np.mean([d.hflip for d in draws]) < 0.55
    assert 0.45 < np.mean([d.vflip for d in draws]) < 0.55


# loss

def test_bce_examples():
    assert float(bce_loss([0.5, 0.5, 0.5], [0, 1, 1])) == pytest.approx(math.log(2), abs=1e-12)
    assert float(bce_loss([1.0, 0.0], [1, 0])) < 1e-6
    assert float(bce_loss([0.9, 0.2], [1, 0])) == pytest.approx(-(math.log(0.9) + math.log(0.8)) / 2, abs=1e-12)
    assert float(bce_loss([0.9, 0.2], [1, 0])) == pytest.approx(0.1643, abs=1e-4)


def test_bce_length_mismatch():
    with pytest.raises(ValueError, match="length mismatch"):
        bce_loss([0.5, 0.5], [1])


@given(st.lists(st.tuples(st.floats(0, 1), st.sampled_from([0, 1])), min_size=1, max_size=30))
def test_bce_nonnegative_and_finite(pairs):
    p, y = zip(*pairs)
    loss = float(bce_loss(list(p), list(y)))
    assert 0 <= loss < 20


# early stopping

def test_early_stopping_counts_only_real_improvements():
    stop = EarlyStopping(patience=2, min_delta=0.1)
    assert stop.step(1.0, 1)
    assert not stop.step(0.95, 2)
    assert not stop.should_stop
    assert not stop.step(0.99, 3)
    assert stop.should_stop and stop.best_epoch == 1


def scripted(losses):
    calls = iter(losses)
    return lambda model, samples: (next(calls), 0.5)


def test_scripted_sequence_stops_after_epoch_12():
    eps = 1e-3
    seq = [1.0, 0.9] + [0.9 + eps] * 10 + [0.1] * 5
    result = fit(morph_model(), feature_samples(8, "t"), feature_samples(4, "v"),
                 TrainConfig(augment=False, batch_size=4), evaluate=scripted(seq))
    assert len(result.logs) == 12
    assert result.checkpoint.epoch == 2 and result.checkpoint.val_loss == 0.9


def test_strictly_decreasing_runs_all_epochs():
    seq = [1.0 - 0.01 * i for i in range(50)]
    result = fit(morph_model(), feature_samples(8, "t"), feature_samples(4, "v"),
                 TrainConfig(augment=False, batch_size=8), evaluate=scripted(seq))
    assert len(result.logs) == 50 and result.checkpoint.epoch == 50


def test_leakage_raises_before_training(monkeypatch):
    calls = []
    monkeypatch.setattr(training, "_train_step", lambda *a: calls.append(1))
    train = feature_samples(8, "t", patients=["A", "B"] * 4)
    val = feature_samples(4, "v", patients=["B", "C"] * 2)
    with pytest.raises(LeakageError, match="B"):
        fit(morph_model(), train, val, CFG)
    assert calls == []


def test_unlabelled_cells_rejected():
    train = feature_samples(6, "t")
    train.labels[0] = -1
    with pytest.raises(ValueError, match="unlabelled"):
        fit(morph_model(), train, feature_samples(4, "v"), CFG)


def test_updates_never_see_validation_cells(monkeypatch):
    seen = []
    real_step = training._train_step

    def counting_step(model, optimizer, batch):
        seen.extend(batch.cell_ids)
        return real_step(model, optimizer, batch)

    monkeypatch.setattr(training, "_train_step", counting_step)
    train, val = image_samples(12, "t"), image_samples(6, "v", seed=1)
    model = build_model(ModelConfig(variant=Variant.ENSEMBLE, backbone_id="gcvit_micro", pretrained=False), seed=0)
    fit(model, train, val, TrainConfig(max_epochs=2, batch_size=4))
    assert len(seen) == 2 * len(train)
    assert set(seen) == set(train.cell_ids)
    assert not set(seen) & set(val.cell_ids)


def test_checkpoint_reevaluates_to_min_logged_loss(tmp_path):
    train, val = feature_samples(64, "t"), feature_samples(32, "v", seed=1)
    model = morph_model()
    result = fit(model, train, val, TrainConfig(max_epochs=15, batch_size=16, base_lr=1e-3, augment=False),
                 run_dir=tmp_path)
    best = min(log.val_loss for log in result.logs)
    assert result.checkpoint.val_loss == best
    model.load_state_dict(result.checkpoint.state_dict)
    loss, _, _ = evaluate_loss(model, val)
    assert abs(loss - best) < 1e-5

    assert [log.epoch for log in read_epoch_logs(tmp_path / "epochs.jsonl")] == [log.epoch for log in result.logs]
    saved = json.loads((tmp_path / "config.json").read_text())
    assert saved["train"]["base_lr"] == 1e-3 and saved["model"]["variant"] == "morphology"
    assert (tmp_path / "best" / "model.bin").exists()


def test_logs_are_finite_and_bounded():
    result = fit(morph_model(), feature_samples(16, "t"), feature_samples(8, "v"),
                 TrainConfig(max_epochs=3, batch_size=8, augment=False))
    for log in result.logs:
        assert math.isfinite(log.train_loss) and math.isfinite(log.val_loss)
        assert 0 <= log.train_acc <= 1 and 0 <= log.val_acc <= 1


def test_optimizer_group_rates_follow_schedule(monkeypatch):
    seen = []
    real_step = training._train_step

    def spy(model, optimizer, batch):
        seen.append({g["group_index"]: g["lr"] for g in optimizer.param_groups})
        return real_step(model, optimizer, batch)

    monkeypatch.setattr(training, "_train_step", spy)
    cfg = TrainConfig(max_epochs=2, batch_size=4, augment=False)
    train = image_samples(8, "t")
    model = build_model(ModelConfig(variant=Variant.VISION, backbone_id="gcvit_micro", pretrained=False), seed=0)
    fit(model, train, image_samples(4, "v"), cfg)
    total = 4
    for step, rates in enumerate(seen):
        assert sorted(rates) == [0, 1, 2, 3, 4]
        for k, lr in rates.items():
            assert lr == lr_at(step, total, k, cfg)


# overfit sanity

def test_overfit_separable_morphology():
    assert overfit_sanity(morph_model(), feature_samples(16, "o")) < 0.05


def test_overfit_identical_inputs_respects_entropy_floor():
    batch = feature_samples(16, "o", separable=False)
    batch.features[:] = batch.features[0]
    batch.labels[:] = np.array([1] * 4 + [0] * 12, dtype=np.float32)
    p = 0.25
    entropy = -(p * math.log(p) + (1 - p) * math.log(1 - p))
    assert overfit_sanity(morph_model(), batch) >= entropy - 1e-6


def test_overfit_tiny_ensemble():
    model = build_model(ModelConfig(variant=Variant.ENSEMBLE, backbone_id="gcvit_micro", pretrained=False), seed=0)
    assert overfit_sanity(model, image_samples(16, "o")) < 0.05


# configuration

def test_train_config_validation_and_json(monkeypatch):
    with pytest.raises(ValueError, match="unknown training config keys"):
        TrainConfig.from_json({"learning_rate": 1})
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    assert TrainConfig.from_json(CFG.to_json()) == CFG
    monkeypatch.setenv("SDF_SEED", "17")
    assert CFG.with_env_seed().seed == 17


def test_defaults_match_recipe():
    assert (CFG.base_lr, CFG.layer_decay, CFG.warmup_proportion) == (5e-5, 0.12, 0.1)
    assert (CFG.patience, CFG.max_epochs, CFG.batch_size) == (10, 50, 32)
    assert CFG.adam_betas == (0.9, 0.999) and CFG.adam_eps == 1e-8


def test_non_finite_loss_aborts():
    train = feature_samples(8, "t")
    train.features[0, 0] = np.nan
    with pytest.raises(FloatingPointError):
        fit(morph_model(), train, feature_samples(4, "v"), TrainConfig(augment=False))
