import numpy as np
import pytest
import torch

from twinseg.config import DataConfig, SyntheticSpec
from twinseg.data import (IMAGE_MEAN, IMAGE_STD, augment, denormalize_image, export_voc_style,
                          generate_synthetic, load_voc_style, normalize_image)
from twinseg.errors import DataError
from twinseg.pseudo import IGNORE_INDEX


def small_spec(**kw):
    base = dict(num_classes=3, canvas=(32, 32), train_count=12, val_count=4, rng_seed=0)
    base.update(kw)
    return SyntheticSpec(**base)


def test_generation_deterministic():
    a_train, a_val = generate_synthetic(small_spec())
    b_train, b_val = generate_synthetic(small_spec())
    for xs, ys in ((a_train, b_train), (a_val, b_val)):
        for x, y in zip(xs, ys):
            assert x.id == y.id
            assert torch.equal(x.image, y.image)
            assert torch.equal(x.labels, y.labels)
            assert torch.equal(x.gt_mask, y.gt_mask)


def test_labels_match_mask_presence():
    train, val = generate_synthetic(small_spec(train_count=40))
    for rec in train + val:
        present = {int(v) - 1 for v in torch.unique(rec.gt_mask).tolist() if v > 0}
        labeled = {i for i, v in enumerate(rec.labels.tolist()) if v == 1.0}
        assert present == labeled
        assert labeled, "every record carries at least one class"


def test_class_frequency_matches_sampler():
    spec = small_spec(train_count=500, val_count=1, objects_min=1, objects_max=3)
    train, _ = generate_synthetic(spec)
    # sampler: n ~ U{1..3} objects, each class ~ U{0..K-1}; ignoring occlusion,
    # P(class k present) = 1 - E[(1 - 1/K)^n]
    k = spec.num_classes
    p = 1 - np.mean([(1 - 1 / k) ** n for n in (1, 2, 3)])
    counts = np.zeros(k)
    for rec in train:
        counts += rec.labels.numpy()
    freq = counts / len(train)
    # occlusion can only remove a class, so allow the empirical rate to sit
    # slightly under p; +-10% of p bounds the band
    assert (np.abs(freq - p) <= 0.1 * p + 0.02).all(), (freq, p)


def test_images_normalized_range():
    train, _ = generate_synthetic(small_spec())
    rgb = denormalize_image(train[0].image)
    assert rgb.min() >= 0 and rgb.max() <= 1
    assert torch.allclose(normalize_image(rgb), train[0].image, atol=1e-6)
    assert IMAGE_MEAN == 0.5 and IMAGE_STD == 0.25


def _data_cfg(**kw):
    base = dict(synthetic=small_spec(), crop=32)
    base.update(kw)
    return DataConfig(**base)


def test_augment_output_size_contract():
    train, _ = generate_synthetic(small_spec())
    cfg = _data_cfg(crop=32, scale_range=(0.5, 2.0))
    for i in range(8):
        rng = np.random.default_rng(i)
        out = augment(train[i], rng, cfg)
        assert out.image.shape == (3, 32, 32)
        assert out.gt_mask.shape == (32, 32)
        assert torch.equal(out.labels, train[i].labels)


def test_augment_identity_case():
    train, _ = generate_synthetic(small_spec())
    cfg = _data_cfg(scale_range=(1.0, 1.0), hflip_prob=0.0)
    out = augment(train[0], np.random.default_rng(0), cfg)
    assert torch.equal(out.image, train[0].image)
    assert torch.equal(out.gt_mask, train[0].gt_mask)


def test_augment_double_flip_is_identity():
    train, _ = generate_synthetic(small_spec())
    cfg = _data_cfg(scale_range=(1.0, 1.0), hflip_prob=1.0)
    once = augment(train[0], np.random.default_rng(0), cfg)
    twice = augment(once, np.random.default_rng(0), cfg)
    assert torch.equal(twice.image, train[0].image)
    assert torch.equal(twice.gt_mask, train[0].gt_mask)


def test_augment_pads_with_mean_and_ignore():
    train, _ = generate_synthetic(small_spec())
    cfg = _data_cfg(scale_range=(0.5, 0.5), hflip_prob=0.0)
    out = augment(train[0], np.random.default_rng(0), cfg)
    assert out.image.shape == (3, 32, 32)
    # scaled content is 16x16; padding is the dataset mean (0 after normalize)
    assert torch.equal(out.image[:, 20:, 20:], torch.zeros(3, 12, 12))
    assert (out.gt_mask[20:, 20:] == IGNORE_INDEX).all()


def test_augment_mask_labels_subset():
    train, _ = generate_synthetic(small_spec(train_count=20))
    cfg = _data_cfg()
    for i, rec in enumerate(train):
        out = augment(rec, np.random.default_rng(i), cfg)
        orig = set(torch.unique(rec.gt_mask).tolist())
        got = set(torch.unique(out.gt_mask).tolist())
        assert got <= orig | {IGNORE_INDEX}


def test_export_and_load_round_trip(tmp_path):
    train, _ = generate_synthetic(small_spec(train_count=5))
    export_voc_style(train, tmp_path)
    ds = load_voc_style(tmp_path, num_classes=3)
    assert len(ds) == 5
    for orig, got in zip(train, ds.records()):
        assert got.id == orig.id
        assert torch.equal(got.labels, orig.labels)
        assert torch.equal(got.gt_mask, orig.gt_mask)
        # images pass through 8-bit quantization
        assert (got.image - orig.image).abs().max() <= (0.5 / 255) / IMAGE_STD + 1e-6


def test_loader_empty_list_file(tmp_path):
    (tmp_path / "labels.txt").write_text("")
    assert len(load_voc_style(tmp_path, num_classes=3)) == 0


def test_loader_parses_class_indices(tmp_path):
    train, _ = generate_synthetic(small_spec(train_count=1))
    export_voc_style(train, tmp_path)
    (tmp_path / "labels.txt").write_text(f"{train[0].id} 0 2\n")
    rec = load_voc_style(tmp_path, num_classes=3)[0]
    assert rec.labels.tolist() == [1.0, 0.0, 1.0]


def test_loader_missing_image_names_id(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels.txt").write_text("ghost 0\n")
    with pytest.raises(DataError, match="ghost"):
        load_voc_style(tmp_path, num_classes=3)


def test_loader_missing_labels_file(tmp_path):
    with pytest.raises(DataError, match="labels.txt"):
        load_voc_style(tmp_path, num_classes=3)


def test_loader_class_out_of_range(tmp_path):
    train, _ = generate_synthetic(small_spec(train_count=1))
    export_voc_style(train, tmp_path)
    (tmp_path / "labels.txt").write_text(f"{train[0].id} 5\n")
    with pytest.raises(DataError, match="out of range"):
        load_voc_style(tmp_path, num_classes=3)


def test_loader_warns_on_mask_label_disagreement(tmp_path):
    train, _ = generate_synthetic(small_spec(train_count=1))
    export_voc_style(train, tmp_path)
    all_classes = " ".join(str(i) for i in range(3))
    (tmp_path / "labels.txt").write_text(f"{train[0].id} {all_classes}\n")
    ds = load_voc_style(tmp_path, num_classes=3)
    present = {int(v) - 1 for v in torch.unique(train[0].gt_mask).tolist() if v > 0}
    if present == {0, 1, 2}:
        pytest.skip("sample happens to contain every class")
    with pytest.warns(UserWarning, match="label file"):
        rec = ds[0]
    assert rec.labels.tolist() == [1.0, 1.0, 1.0]  # label file wins
