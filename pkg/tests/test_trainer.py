import json

import numpy as np
import pytest
import torch

from csfinpaint import losses as L
from csfinpaint.dropout import make_rng
from csfinpaint.networks import DiscriminatorSpec, GeneratorSpec, ModelBundle
from csfinpaint.phantom import make_phantom
from csfinpaint.trainer import (FoldSplit, SubjectSample, TrainConfig, augment, build_item, finetune,
                                generate_masks, lr_schedule, make_folds, run_training, train_fold)

GS, DS = GeneratorSpec(base_width=4), DiscriminatorSpec(base_width=4)


def tiny_cfg(**kw):
    base = dict(batch_size=1, crops_per_sample=1, crop_size=24, epochs=2, decay_start=1, masks_per_sample=1,
                finetune_masks_per_sample=1, max_iterations=None)
    base.update(kw)
    return TrainConfig(**base)


def cohort(n_subjects, samples=("test",), shape=(24, 24, 24), shift=0.0, seed=0):
    rng = make_rng(seed)
    out = []
    for i in range(n_subjects):
        for s in samples:
            ph = make_phantom(shape, rng, shift=shift, border=1)
            out.append(SubjectSample(f"sub{i:02d}", s, ph.t1, ph.flair, ph.tissue))
    return out


def test_lr_schedule():
    cfg = TrainConfig(epochs=160, decay_start=80)
    assert lr_schedule(0, cfg) == 2e-4
    assert lr_schedule(79, cfg) == 2e-4
    assert lr_schedule(120, cfg) == pytest.approx(1e-4)
    assert lr_schedule(159, cfg) > 0
    assert lr_schedule(160, cfg) == 0


def test_config_guards():
    with pytest.raises(ValueError):
        TrainConfig(epochs=10, decay_start=20)


def test_folds_21_subjects():
    ids = [f"s{i}" for i in range(21)]
    folds = make_folds(ids, 5, seed=0)
    assert len(folds) == 5
    validated = set()
    for f in folds:
        assert len(f.train_ids) == 16 and len(f.val_ids) == 5
        assert not set(f.train_ids) & set(f.val_ids)
        validated |= set(f.val_ids)
    assert validated == set(ids)
    assert make_folds(ids, 5, seed=0) == folds


def test_fold_leakage_rejected():
    with pytest.raises(ValueError, match="both"):
        FoldSplit(0, ["a", "b"], ["b"])


def test_kirby_shaped_mask_count():
    samples = cohort(21, ("test", "retest"), shape=(12, 12, 12))
    masks = generate_masks(samples, 5, seed=0)
    assert sum(len(v) for v in masks.values()) == 210


def test_augment_center_rule_and_replay():
    s = cohort(1, shape=(24, 24, 24))[0]
    mask = generate_masks([s], 1, 0)[(s.subject_id, s.sample_id)][0]
    item = build_item(s, mask, make_rng(0))
    cfg = tiny_cfg(crops_per_sample=4, crop_size=16, flip_prob=0, rotate_prob=0)
    crops = augment(item, make_rng(5), cfg)
    assert len(crops) == 4
    for c in crops:
        assert c.mask.shape == (16, 16, 16) and c.inputs.shape == (11, 16, 16, 16)
        assert c.mask.any()
        assert c.flips == (False, False, False) and c.rot_k == 0
    again = augment(item, make_rng(5), TrainConfig(**{**cfg.__dict__, "flip_prob": 0.5, "rotate_prob": 0.5}))
    replay = augment(item, make_rng(5), TrainConfig(**{**cfg.__dict__, "flip_prob": 0.5, "rotate_prob": 0.5}))
    assert [(c.origin, c.flips, c.rot_k) for c in again] == [(c.origin, c.flips, c.rot_k) for c in replay]
    for a, b in zip(again, replay):
        np.testing.assert_array_equal(a.inputs, b.inputs)


def test_augment_transforms_consistent():
    s = cohort(1, shape=(16, 16, 16))[0]
    mask = generate_masks([s], 1, 0)[(s.subject_id, s.sample_id)][0]
    item = build_item(s, mask, make_rng(0))
    cfg = tiny_cfg(crop_size=16, crops_per_sample=8, flip_prob=0.5, rotate_prob=0.5)
    for c in augment(item, make_rng(2), cfg):
        # inputs channel 0 holds the noise-filled target; outside the mask it equals the target crop
        np.testing.assert_array_equal(c.inputs[0][~c.mask], c.target[~c.mask])
        np.testing.assert_allclose(c.inputs[2] * 6, c.tissue)


def test_augment_empty_mask():
    s = cohort(1)[0]
    item = build_item(s, np.zeros(s.t1.shape, bool), make_rng(0))
    with pytest.raises(ValueError, match="no positive voxels"):
        augment(item, make_rng(0), tiny_cfg())


def _items(samples, cfg):
    masks = generate_masks(samples, 1, 0)
    rng = make_rng(1)
    return [build_item(s, m, rng) for s in samples for m in masks[(s.subject_id, s.sample_id)]]


def test_training_deterministic():
    samples = cohort(2)
    cfg = tiny_cfg(max_iterations=3)
    curves = []
    for _ in range(2):
        b = ModelBundle.create(GS, DS, seed=0)
        res = run_training(b, _items(samples, cfg), [], cfg, L.toy_extractor())
        curves.append(res.state.history)
    assert curves[0] == curves[1]
    assert len(curves[0]) == 3


def test_train_fold_artifacts(tmp_path):
    samples = cohort(3, ("test", "retest"))
    split = make_folds([s.subject_id for s in samples], 3)[0]
    cfg = tiny_cfg()
    res = train_fold(split, samples, cfg, bundle=ModelBundle.create(GS, DS), extractor=L.toy_extractor(),
                     run_dir=tmp_path)
    assert (tmp_path / "losses.csv").exists()
    val = json.loads((tmp_path / "validation.json").read_text())
    assert len(val) == 2 and {"l1", "psnr", "ssim"} <= set(val[0])
    for d in ("epoch_0", "epoch_1", "best"):
        assert (tmp_path / d / "generator.pt").exists()
    assert (tmp_path / "epoch_1" / "optimizers.pt").exists()
    best = ModelBundle.load(tmp_path / "best")
    assert best.metadata["iteration"] > 0
    assert res.state.iteration == 2 * 2 * 2  # epochs * train subjects * samples


def test_nan_guard_writes_diagnostic(tmp_path):
    s = cohort(1)[0]
    item = _items([s], tiny_cfg())[0]
    item.target[:] = np.nan
    with pytest.raises(RuntimeError, match="aborted"):
        run_training(ModelBundle.create(GS, DS), [item], [], tiny_cfg(), L.toy_extractor(), tmp_path)
    assert (tmp_path / "diagnostic" / "generator.pt").exists()


def test_finetune_split_and_noop():
    samples = cohort(5)
    base = ModelBundle.create(GS, DS, seed=1)
    seen = {}

    def spy(state, trainer):
        return True

    cfg = tiny_cfg(max_iterations=0)
    res = finetune(base, samples, cfg, extractor=L.toy_extractor(), callback=spy)
    assert res.bundle.checksum() == base.checksum()
    assert res.state.iteration == 0

    import csfinpaint.trainer as T
    orig = T.train_fold

    def capture(split, *a, **k):
        seen["split"] = split
        return orig(split, *a, **k)

    T.train_fold = capture
    try:
        finetune(base, samples, cfg, train_subject="sub02", extractor=L.toy_extractor())
    finally:
        T.train_fold = orig
    assert seen["split"].train_ids == ["sub02"] and len(seen["split"].val_ids) == 4


def test_finetune_cohort_too_small():
    with pytest.raises(ValueError, match="cohort too small"):
        finetune(ModelBundle.create(GS, DS), cohort(1), tiny_cfg(), extractor=L.toy_extractor())


def test_finetune_updates_all_weights():
    samples = cohort(2)
    base = ModelBundle.create(GS, DS, seed=2)
    res = finetune(base, samples, tiny_cfg(max_iterations=1, epochs=1, decay_start=0),
                   extractor=L.toy_extractor())
    moved = [not torch.equal(a, b) for a, b in zip(base.generator.parameters(), res.bundle.generator.parameters())]
    assert all(moved)
