import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from csfinpaint.dropout import (DropoutMask, apply_noise_fill, generate_dropout_mask, make_mtis, make_rng,
                                patch_length_bounds, sidecar_path)
from csfinpaint.volume import Tissue, Volume

from conftest import cube_phantom
from oracles import replay_dropout


def test_patch_bounds_100():
    assert patch_length_bounds(100) == (5, 10)
    assert patch_length_bounds(128) == (6, 12)
    assert patch_length_bounds(10) == (1, 1)


def test_edges_within_bounds_100(phantom32):
    img = cube_phantom(100, border=5)
    for seed in range(20):
        m = generate_dropout_mask(img, make_rng(seed))
        for s, e in m.patches:
            assert all(5 <= b - a <= 10 for a, b in zip(s, e))


def test_budget_bound_128():
    assert 128 ** 3 * 0.01 == pytest.approx(20971.52)
    img = cube_phantom(128, border=4)
    for seed in range(10):
        m = generate_dropout_mask(img, make_rng(seed))
        assert m.max_drop_volume <= 20971.52
        pre_final = m.total_drop_volume - m.patch_volumes[-1]
        assert pre_final < m.max_drop_volume or len(m.patches) == 1


@pytest.mark.parametrize("seed", [0, 7, 42])
def test_matches_replay_oracle(seed):
    img = cube_phantom(40, border=3)
    m = generate_dropout_mask(img, make_rng(seed))
    ref, total = replay_dropout(img, seed)
    np.testing.assert_array_equal(m.data, ref)
    assert m.total_drop_volume == total


def test_inside_foreground_and_deterministic():
    img = cube_phantom(32, border=4)
    a = generate_dropout_mask(img, make_rng(5))
    b = generate_dropout_mask(img, make_rng(5))
    assert a.data.any()
    assert not (a.data & (img == 0)).any()
    np.testing.assert_array_equal(a.data, b.data)
    assert a.patches == b.patches


def test_overlaps_double_counted():
    img = cube_phantom(20, border=0)
    for seed in range(50):
        m = generate_dropout_mask(img, make_rng(seed))
        assert m.total_drop_volume == sum(m.patch_volumes)
        assert m.data.sum() <= m.total_drop_volume


def test_unplaceable_raises():
    img = np.ones((40, 40, 40), dtype=np.float32)
    img[::2] = 0  # minimum edge is 2, so every patch straddles a zero slab
    with pytest.raises(RuntimeError, match="no valid patch placement"):
        generate_dropout_mask(img, make_rng(0), max_rejections=200)


def test_no_foreground_raises():
    with pytest.raises(ValueError):
        generate_dropout_mask(np.zeros((8, 8, 8)), make_rng(0))


@settings(max_examples=25, deadline=None)
@given(n=st.integers(12, 40), border=st.integers(1, 3), seed=st.integers(0, 2 ** 32 - 1))
def test_property_mask_valid(n, border, seed):
    img = cube_phantom(n, border=border)
    m = generate_dropout_mask(img, make_rng(seed))
    lo, hi = patch_length_bounds(n)
    assert not (m.data & (img == 0)).any()
    for s, e in m.patches:
        assert all(lo <= b - a <= hi for a, b in zip(s, e))
    union = np.zeros_like(m.data)
    for s, e in m.patches:
        union[tuple(slice(a, b) for a, b in zip(s, e))] = True
    np.testing.assert_array_equal(union, m.data)


def test_noise_fill_identities(rng):
    v = rng.random((32, 32, 32)).astype(np.float32)
    np.testing.assert_array_equal(apply_noise_fill(v, np.zeros(v.shape, bool), rng), v)
    full = apply_noise_fill(v, np.ones(v.shape, bool), rng)
    assert abs(full.mean()) < 0.05 and abs(full.std() - 1) < 0.05
    mixed = rng.random(v.shape) < 0.3
    out = apply_noise_fill(v, mixed, rng)
    np.testing.assert_array_equal(out[~mixed], v[~mixed])
    assert out.min() < 0 or out.max() > 1  # not clamped


def test_noise_fill_volume_passthrough(rng):
    vol = Volume(np.ones((4, 4, 4), np.float32), spacing=(1, 1, 1.2))
    out = apply_noise_fill(vol, np.zeros((4, 4, 4), bool), rng)
    assert isinstance(out, Volume) and out.spacing == vol.spacing


def test_mtis():
    tis = np.full((10, 10, 10), Tissue.WM, dtype=np.uint8)
    tis[:2] = Tissue.CSF
    assert np.all(make_mtis(tis, np.zeros(tis.shape, bool)) == 0)
    np.testing.assert_array_equal(make_mtis(tis, np.ones(tis.shape, bool)), tis)
    patch = np.zeros(tis.shape, bool)
    patch[4:7, 3:6, 2:8] = True
    out = make_mtis(tis, patch)
    assert np.array_equal(out != 0, patch)
    assert np.all(out[patch] == Tissue.WM)


def test_mask_save_load(tmp_path):
    img = cube_phantom(24, border=2)
    m = generate_dropout_mask(img, make_rng(9), seed=9)
    path = tmp_path / "m.nii.gz"
    m.save(path)
    assert sidecar_path(path).name == "m.json"
    side = json.loads(sidecar_path(path).read_text())
    assert side["seed"] == 9 and side["mask_voxels"] == int(m.data.sum())
    back = DropoutMask.load(path)
    np.testing.assert_array_equal(back.data, m.data)
    assert back.patches == m.patches
