import json

import numpy as np
import pytest
from PIL import Image as PILImage

from sdacd.core import BiTemporalSample, ChangeMask, Image
from sdacd.data import (
    DatasetSpec, SyntheticConfig, apply_geometry, augment, instance_crop_augment, load_dataset,
    synthesize_benchmark, synthesize_scene, tile_directory, write_dataset, write_manifest,
)
from sdacd.errors import ConfigError, IngestionError
from conftest import make_sample


def _xor_loop(a, b):
    out = np.zeros(a.shape, dtype=np.uint8)
    for r in range(a.shape[0]):
        for c in range(a.shape[1]):
            out[r, c] = 1 if bool(a[r, c]) != bool(b[r, c]) else 0
    return out


def test_gt_is_occupancy_symmetric_difference():
    cfg = SyntheticConfig(n_samples=6, tile_size=32, change_rate=0.5, seed=2)
    for i in range(cfg.n_samples):
        scene = synthesize_scene(cfg, i)
        assert np.array_equal(scene.gt, _xor_loop(scene.occupancy_pre, scene.occupancy_post))


def test_gt_matches_pixel_changes_without_shift():
    cfg = SyntheticConfig(n_samples=6, tile_size=32, change_rate=0.5, shift_strength=0.0, seed=4)
    for i in range(cfg.n_samples):
        scene = synthesize_scene(cfg, i)
        changed = (scene.pre_rgb != scene.post_rgb).any(-1)
        assert np.array_equal(changed.astype(np.uint8), scene.gt)


def test_no_change_rate():
    for s in synthesize_benchmark(SyntheticConfig(n_samples=5, tile_size=32, change_rate=0.0)):
        assert s.gt.values.sum() == 0


def test_deterministic():
    cfg = SyntheticConfig(n_samples=3, tile_size=32, seed=9)
    a, b = synthesize_benchmark(cfg), synthesize_benchmark(cfg)
    for x, y in zip(a, b):
        assert x.pre.values.tobytes() == y.pre.values.tobytes()
        assert x.gt.values.tobytes() == y.gt.values.tobytes()
    assert [s.id for s in a] == ["syn_00000", "syn_00001", "syn_00002"]


def _unchanged_mean_gap(strength):
    samples = synthesize_benchmark(SyntheticConfig(n_samples=20, tile_size=32, shift_strength=strength, seed=1))
    pre = np.concatenate([s.pre.values[s.gt.values == 0] for s in samples])
    post = np.concatenate([s.post.values[s.gt.values == 0] for s in samples])
    return np.abs((pre.mean(0) - post.mean(0)) / 2)   # in [0, 1] intensity units


def test_zero_shift_population_means():
    assert _unchanged_mean_gap(0.0).max() < 0.02


def test_shift_grows_with_strength():
    gaps = [_unchanged_mean_gap(s).sum() for s in (0.0, 0.5, 1.0)]
    assert gaps[0] < gaps[1] < gaps[2]


def test_config_validation():
    with pytest.raises(ConfigError):
        SyntheticConfig(change_rate=1.5)
    with pytest.raises(ConfigError):
        SyntheticConfig(shift_strength=-1)


def test_flip_involution_and_rotation_cycle():
    s = make_sample(8, 12)
    for h, v in ((True, False), (False, True), (True, True)):
        twice = apply_geometry(apply_geometry(s, h, v), h, v)
        assert np.array_equal(twice.pre.values, s.pre.values) and np.array_equal(twice.gt.values, s.gt.values)
    r = s
    for _ in range(4):
        r = apply_geometry(r, k=1)
    assert np.array_equal(r.post.values, s.post.values) and np.array_equal(r.gt.values, s.gt.values)


def test_augment_preserves_change_count():
    rng = np.random.default_rng(0)
    s = make_sample(8, 8)
    for _ in range(20):
        a = augment(s, rng)
        assert a.gt.values.sum() == s.gt.values.sum()
        assert sorted(a.pre.values.ravel()) == sorted(s.pre.values.ravel())


def _single_blob(h=16, w=16):
    gt = np.zeros((h, w), dtype=np.uint8)
    gt[5:8, 6:9] = 1
    z = np.zeros((h, w, 3))
    return BiTemporalSample(Image(z), Image(z), ChangeMask(gt), "blob")


def test_instance_crops():
    rng = np.random.default_rng(0)
    empty = BiTemporalSample(Image(np.zeros((16, 16, 3))), Image(np.zeros((16, 16, 3))), ChangeMask(np.zeros((16, 16))))
    assert instance_crop_augment([empty], 3, 8, rng) == []
    crops = instance_crop_augment([_single_blob()], 3, 8, rng)
    assert len(crops) == 3 and all(c.gt.values.sum() >= 1 and c.gt.height == 8 for c in crops)
    two = _single_blob()
    gt = two.gt.values.copy()
    gt[12:14, 12:14] = 1
    two = BiTemporalSample(two.pre, two.post, ChangeMask(gt))
    assert len(instance_crop_augment([two], 4, 8, rng)) == 8


def test_instance_crop_oversized_component():
    gt = np.zeros((16, 16), dtype=np.uint8)
    gt[1:15, 2:14] = 1
    s = BiTemporalSample(Image(np.zeros((16, 16, 3))), Image(np.zeros((16, 16, 3))), ChangeMask(gt))
    crops = instance_crop_augment([s], 2, 8, np.random.default_rng(0))
    assert all(c.gt.values.sum() > 0 for c in crops)


def test_loader_roundtrip_and_count(tmp_path):
    samples = synthesize_benchmark(SyntheticConfig(n_samples=5, tile_size=32, seed=5))
    write_dataset(samples, tmp_path, "train")
    loaded = load_dataset(DatasetSpec(tmp_path, "train", tile_size=32))
    assert len(loaded) == 5
    for a, b in zip(samples, loaded):
        assert a.id == b.id
        np.testing.assert_array_equal(a.gt.values, b.gt.values)
        np.testing.assert_allclose(a.pre.values, b.pre.values, atol=1e-6)


def test_loader_rejects_unmatched(tmp_path):
    write_dataset(synthesize_benchmark(SyntheticConfig(n_samples=2, tile_size=32)), tmp_path)
    (tmp_path / "train" / "OUT" / "syn_00001.png").unlink()
    with pytest.raises(IngestionError, match="syn_00001"):
        load_dataset(DatasetSpec(tmp_path, "train", tile_size=32))


def test_loader_thresholds_gt_and_sizes(tmp_path):
    base = tmp_path / "train"
    for d in ("A", "B", "OUT"):
        (base / d).mkdir(parents=True)
    PILImage.fromarray(np.zeros((4, 4, 3), np.uint8)).save(base / "A" / "x.png")
    PILImage.fromarray(np.zeros((4, 4, 3), np.uint8)).save(base / "B" / "x.png")
    PILImage.fromarray(np.array([[0, 255, 127, 128]] * 4, np.uint8)).save(base / "OUT" / "x.png")
    (s,) = load_dataset(DatasetSpec(tmp_path, "train", tile_size=None))
    assert s.gt.values[0].tolist() == [0, 1, 0, 1]
    with pytest.raises(IngestionError):
        load_dataset(DatasetSpec(tmp_path, "train", tile_size=8))
    (r,) = load_dataset(DatasetSpec(tmp_path, "train", tile_size=8, resize=True))
    assert r.gt.values.shape == (8, 8)
    with pytest.raises(IngestionError):
        load_dataset(DatasetSpec(tmp_path / "nowhere", "train"))


def test_tile_directory(tmp_path):
    write_dataset(synthesize_benchmark(SyntheticConfig(n_samples=2, tile_size=40)), tmp_path / "src")
    assert tile_directory(tmp_path / "src", tmp_path / "out", 16) == 2 * 4
    assert len(load_dataset(DatasetSpec(tmp_path / "out", "train", tile_size=16))) == 8


def test_manifest(tmp_path):
    cfg = SyntheticConfig(shift_strength=0.0)
    write_manifest(tmp_path / "m.json", cfg, config_hash="abc")
    doc = json.loads((tmp_path / "m.json").read_text())
    assert doc["generator"]["shift_strength"] == 0.0 and doc["config_hash"] == "abc"
