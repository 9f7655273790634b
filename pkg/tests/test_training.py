import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from octcascade import dataprep, nn_core, phantom, training
from octcascade.nn_core import GeneratorConfig, TisnConfig
from octcascade.training import TrainConfig


def reference_rule(losses, max_epochs, lr, patience, lr_patience, factor, min_delta):
    """Reference replay: recompute staleness from the full history at every epoch."""
    lrs, halvings = [], []
    since_lr = 0
    for e in range(1, max_epochs + 1):
        lrs.append(lr)
        hist = losses[:e]
        best_before = min(hist[:-1], default=math.inf)
        improved = hist[-1] < best_before - min_delta
        # staleness: epochs since the last improving epoch
        last_imp = 0
        best = math.inf
        for i, v in enumerate(hist, start=1):
            if v < best - min_delta:
                best, last_imp = v, i
        stale = e - last_imp
        since_lr = 0 if improved else since_lr + 1
        if lr_patience is not None and since_lr == lr_patience:
            lr /= factor
            halvings.append(e)
            since_lr = 0
        if stale >= patience:
            return e, "early_stop", lrs, halvings
    return max_epochs, "max_epochs", lrs, halvings


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from(["walk", "plateau", "noisy"]), st.booleans())
def test_schedule_matches_reference(seed, shape, halving):
    rng = np.random.default_rng(seed)
    n = 60
    if shape == "walk":
        seq = np.cumsum(rng.normal(-0.01, 0.05, n)) + 5
    elif shape == "plateau":
        k = int(rng.integers(1, n))
        seq = np.concatenate([np.linspace(2, 1, k), np.full(n - k, 1.0)])
    else:
        seq = np.round(rng.random(n), 1)
    lr_pat = 5 if halving else None
    tr = training.simulate_schedule(seq, n, 1e-3, 10, lr_pat, 2.0, 1e-6)
    e, reason, lrs, halvings = reference_rule(list(seq), n, 1e-3, 10, lr_pat, 2.0, 1e-6)
    assert (tr.epochs_run, tr.stop_reason, tr.halving_epochs) == (e, reason, halvings)
    assert tr.lrs == lrs
    assert tr.best_epoch == int(np.argmin(seq[:e])) + 1


def test_schedule_examples():
    tr = training.simulate_schedule(np.linspace(1, 0, 100), 100, 2e-3)
    assert tr.stop_reason == "max_epochs" and tr.epochs_run == 100
    seq = [3.0, 2.0, 1.0] + [1.0] * 97
    tr = training.simulate_schedule(seq, 100, 2e-3)
    assert tr.stop_reason == "early_stop" and tr.epochs_run == 13
    tr = training.simulate_schedule([1.0] * 150, 150, 1e-3, 10, 5)
    assert tr.halving_epochs[0] == 6 and tr.epochs_run == 11
    assert tr.lrs[-1] == pytest.approx(5e-4)
    sched = training.PlateauSchedule(1e-3, 100, 1)
    sched.step(1.0)
    sched.step(1.0)
    sched.step(1.0)
    assert sched.lr == pytest.approx(2.5e-4)


def test_best_epoch_first_on_ties():
    assert training.best_epoch([3, 1, 2, 1]) == 2


def test_train_config_defaults_and_validation():
    c = TrainConfig(stage="cgan")
    assert (c.learning_rate, c.max_epochs, c.batch_size, c.lr_halving_patience) == (2e-3, 100, 4, None)
    t = TrainConfig(stage="tisn")
    assert (t.learning_rate, t.max_epochs, t.batch_size, t.lr_halving_patience) == (1e-3, 150, 2, 5)
    assert t.early_stop_patience == 10 and t.validation_fraction == 0.1
    for bad in (dict(stage="x"), dict(learning_rate=-1.0), dict(early_stop_patience=0), dict(lam=0.0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_trainlog_monotone_and_save(tmp_path):
    log = training.TrainLog("tisn")
    log.add(epoch=1, validation_loss=0.5, wall_time=0.1)
    with pytest.raises(ValueError):
        log.add(epoch=1, validation_loss=0.4, wall_time=0.1)
    log.save(tmp_path, "t")
    assert (tmp_path / "t.csv").exists() and (tmp_path / "t.json").exists()


def tiny_targets(n=4, size=16, seed=0):
    specs = phantom.sample_specs(n, seed, width=size, height=size, severity="mild")
    samples = [phantom.generate_phantom(s) for s in specs]
    return dataprep.build_targets([s for s, _ in samples], [a for _, a in samples], tile_width=size, shift_px=3)


def tiny_models(seed=0):
    torch.manual_seed(seed)
    gen = nn_core.build_generator(GeneratorConfig(levels=2, base_width=4))
    disc = nn_core.build_discriminator(nn_core.DiscriminatorConfig(layers=1, base_width=4))
    return gen, disc


def test_cgan_smoke_and_reproducibility():
    t = tiny_targets(8)
    cfg = TrainConfig(stage="cgan", max_epochs=2, batch_size=4, mask_channel_replicate_prob=0.5)
    runs = []
    for _ in range(2):
        gen, disc = tiny_models()
        gen, log = training.train_cgan(training.CganDataset.from_targets(t), cfg, gen, disc)
        runs.append((gen, log))
    log = runs[0][1]
    assert len(log.records) == 2 and log.stop_reason == "max_epochs"
    assert log.comparable() == runs[1][1].comparable()
    out = runs[0][0](torch.rand(2, 2, 16, 16) * 2 - 1)
    assert out.min() >= -1 and out.max() <= 1
    assert not runs[0][0].training


def test_tisn_smoke_all_modes():
    t = tiny_targets(4)
    gen, _ = tiny_models()
    cfg = TrainConfig(stage="tisn", max_epochs=2, augment_copies=1)
    for mode in ("gold", "generator", "replicate"):
        ds = training.build_tisn_training_inputs(t.images, t.rows, gold_presegs=t.presegs,
                                                 generator=gen, mode=mode)
        assert len(ds) == 4 and ds.mode == mode
        torch.manual_seed(0)
        net = nn_core.build_tisn(TisnConfig(levels=2, base_width=4))
        net, log = training.train_tisn(ds, cfg, net)
        assert len(log.records) == 2
        p = net(torch.rand(1, 2, 16, 16))
        assert torch.allclose(p.sum(1), torch.ones(1, 16, 16), atol=1e-6)


def test_tisn_inputs_modes():
    t = tiny_targets(3)
    gold = training.build_tisn_training_inputs(t.images, t.rows, gold_presegs=t.presegs)
    for img, sec, r in zip(gold.images, gold.second, gold.rows):
        lab = dataprep.make_binary_label(r, img.shape)
        assert np.all(sec[lab == 0] == 0) and np.allclose(sec[lab == 1], img[lab == 1])
    gen, _ = tiny_models()
    g = training.build_tisn_training_inputs(t.images, t.rows, generator=gen)
    assert g.mode == "generator" and g.second.min() >= 0 and g.second.max() <= 1
    with pytest.raises(ValueError):
        training.build_tisn_training_inputs(t.images, t.rows, gold_presegs=t.presegs[:1])
    with pytest.raises(ValueError):
        training.build_tisn_training_inputs(t.images, t.rows, mode="generator")


def test_augmented_gold_channel_stays_gold():
    t = tiny_targets(3)
    ds = training.build_tisn_training_inputs(t.images, t.rows, gold_presegs=t.presegs)
    aug = training.augment_tisn_dataset(ds, dataprep.AugmentationPolicy("tisn-full", seed=1, transform_prob=0.8), 2)
    assert len(aug) == 9
    for sec, lab in zip(aug.second, aug.labels):
        assert np.all(sec[lab == 0] == 0)
    for lab, r in zip(aug.labels, aug.rows):
        assert np.array_equal(lab, dataprep.make_binary_label(r, lab.shape))


def test_corrupted_gold_copies_keep_labels():
    t = tiny_targets(3)
    ds = training.build_tisn_training_inputs(t.images, t.rows, gold_presegs=t.presegs)
    aug = training.augment_tisn_dataset(ds, dataprep.AugmentationPolicy("tisn-full", seed=1), 2, corruption_prob=1.0)
    assert len(aug) == 9
    assert np.array_equal(aug.second[:3], ds.second)
    leaked = [np.any(sec[lab == 0] != 0) for sec, lab in zip(aug.second[3:], aug.labels[3:])]
    assert any(leaked)
    for lab, r in zip(aug.labels, aug.rows):
        assert np.array_equal(lab, dataprep.make_binary_label(r, lab.shape))
    with pytest.raises(ValueError):
        TrainConfig(stage="tisn", preseg_corruption_prob=1.5)


def test_training_errors():
    empty = training.CganDataset(np.zeros((0, 8, 8)), np.zeros((0, 8, 8)), np.zeros((0, 8, 8)))
    gen, disc = tiny_models()
    with pytest.raises(training.TrainingError):
        training.train_cgan(empty, TrainConfig(stage="cgan"), gen, disc)
    t = tiny_targets(4)
    with pytest.raises(ValueError):
        training.train_cgan(training.CganDataset.from_targets(t), TrainConfig(stage="tisn"), gen, disc)


def test_nan_loss_aborts():
    t = tiny_targets(4)
    ds = training.build_tisn_training_inputs(t.images, t.rows, mode="replicate")
    ds.images[0, 0, 0] = np.nan
    net = nn_core.build_tisn(TisnConfig(levels=2, base_width=4))
    with pytest.raises(training.TrainingError):
        training.train_tisn(ds, TrainConfig(stage="tisn", max_epochs=2, augment_copies=0), net)
