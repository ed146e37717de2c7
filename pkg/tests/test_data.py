import numpy as np
import pytest

from ssl_alpnet.data import (
    Volume,
    discover_volumes,
    load_and_preprocess,
    make_phantom_dataset,
    normalize_intensities,
    partition,
    preprocess,
    read_raw,
    save_volume,
    slice_sample,
)
from ssl_alpnet.errors import ShapeMismatchError, ValidationError, VolumeReadError


def test_container_round_trip(tmp_path, phantoms):
    vol = phantoms[0]
    save_volume(vol, tmp_path / vol.id)
    back = read_raw(tmp_path / vol.id)
    assert back.id == vol.id
    assert np.max(np.abs(back.intensities - vol.intensities)) <= 1e-6
    assert back.class_ids == vol.class_ids
    for k in vol.labels:
        assert np.array_equal(back.labels[k], vol.labels[k])
    loaded = load_and_preprocess(tmp_path / f"{vol.id}.json", target_size=32)
    assert np.max(np.abs(loaded.intensities - vol.intensities)) <= 1e-6


def test_container_header_layout(tmp_path, phantoms):
    import json

    header = json.loads(save_volume(phantoms[0], tmp_path / "v").read_text())
    assert header["shape"] == [12, 32, 32]
    assert header["dtype"] == "f32le"
    assert header["classes"] == {"kidney": 3, "liver": 1, "spleen": 2}
    assert len(header["spacing"]) == 3
    assert (tmp_path / "v.raw").stat().st_size == 12 * 32 * 32 * 4


def test_preprocess_idempotent(phantoms):
    vol = phantoms[1]
    again = preprocess(vol, 32)
    assert np.max(np.abs(again.intensities - vol.intensities)) <= 1e-6
    raw = Volume("r", vol.intensities * 3.0 + 7.0, modality="MRI")
    once = preprocess(raw, 32)
    twice = preprocess(Volume("r", once.intensities, modality="MRI"), 32)
    assert np.max(np.abs(once.intensities - twice.intensities)) <= 1e-6


def test_resize_keeps_labels_binary(rng):
    lab = rng.random((3, 48, 40)) > 0.7
    vol = Volume("v", rng.random((3, 48, 40)), {"a": lab})
    out = preprocess(vol, 32)
    assert out.intensities.shape == (3, 32, 32)
    assert out.labels["a"].dtype == bool
    assert 0 <= out.intensities.min() and out.intensities.max() <= 1


def test_constant_input_constant_output():
    out = preprocess(Volume("c", np.full((2, 20, 20), 42.0), modality="MRI"), 16)
    assert np.ptp(out.intensities) == 0
    assert 0 <= out.intensities.min() <= 1


def test_ct_window():
    x = np.array([-1000.0, -125.0, 75.0, 275.0, 3000.0])
    assert np.allclose(normalize_intensities(x, "CT"), [0, 0, 0.5, 1, 1])


def test_channels_identical(phantoms):
    s = slice_sample(phantoms[0], 5)
    assert s.image.shape == (3, 32, 32)
    assert np.array_equal(s.image[0], s.image[1]) and np.array_equal(s.image[1], s.image[2])


def test_read_errors(tmp_path):
    with pytest.raises(VolumeReadError):
        load_and_preprocess(tmp_path / "missing.json")
    (tmp_path / "bad.json").write_text('{"shape": [2, 2, 2], "dtype": "f32le"}')
    (tmp_path / "bad.raw").write_bytes(b"\0" * 12)
    with pytest.raises(VolumeReadError):
        read_raw(tmp_path / "bad")
    with pytest.raises(VolumeReadError):
        discover_volumes(tmp_path / "nowhere")


def test_label_shape_mismatch(tmp_path):
    with pytest.raises(ShapeMismatchError):
        Volume("v", np.zeros((2, 4, 4)), {"a": np.zeros((2, 4, 5), dtype=bool)})
    (tmp_path / "v.json").write_text('{"shape": [1, 2, 2], "dtype": "f32le", "classes": {"a": 1}}')
    (tmp_path / "v.raw").write_bytes(b"\0" * 16)
    (tmp_path / "v.label.raw").write_bytes(b"\0" * 8)
    with pytest.raises(ShapeMismatchError):
        read_raw(tmp_path / "v")


def test_nifti_loader(tmp_path, phantoms):
    nib = pytest.importorskip("nibabel")
    vol = phantoms[2]
    x = vol.intensities.transpose(2, 1, 0)
    nib.save(nib.Nifti1Image(x, np.eye(4)), str(tmp_path / "case01.nii.gz"))
    nib.save(nib.Nifti1Image(vol.label_map().transpose(2, 1, 0), np.eye(4)), str(tmp_path / "case01_label.nii.gz"))
    loaded = discover_volumes(tmp_path, "nifti", 32)
    assert [v.id for v in loaded] == ["case01"]
    assert loaded[0].intensities.shape == vol.intensities.shape
    assert sorted(loaded[0].labels) == ["class_1", "class_2", "class_3"]
    assert np.array_equal(loaded[0].labels["class_1"], vol.labels["liver"])


def test_phantoms_deterministic():
    a = make_phantom_dataset(2, 8, 32, 3, rng=7)
    b = make_phantom_dataset(2, 8, 32, 3, rng=7)
    for u, v in zip(a, b):
        assert np.array_equal(u.intensities, v.intensities)
        assert all(np.array_equal(u.labels[k], v.labels[k]) for k in u.labels)


def test_phantom_classes_present_and_contiguous(phantoms):
    for vol in phantoms:
        assert 0 <= vol.intensities.min() and vol.intensities.max() <= 1
        for name, lab in vol.labels.items():
            assert lab.sum() > 0
            present = np.flatnonzero(lab.any(axis=(1, 2)))
            assert np.array_equal(present, np.arange(present[0], present[-1] + 1)), name


def test_phantom_extra_classes():
    vols = make_phantom_dataset(1, 10, 32, 4, rng=0)
    assert len(vols[0].labels) == 4
    with pytest.raises(ValidationError):
        make_phantom_dataset(1, 10, 32, 1)
    with pytest.raises(ValidationError):
        make_phantom_dataset(1, 10, 16, 3)


def test_setting_one_has_no_exclusions(phantoms):
    split = partition(phantoms, 0, 1, "upper")
    assert split.excluded == []
    assert split.test_classes == ["liver", "spleen"]
    assert set(split.train_classes) == {"kidney"}


def test_setting_two_exclusion_is_total(phantoms):
    split = partition(phantoms, 1, 2, "upper")
    excluded = set(split.excluded)
    assert excluded
    by_id = {v.id: v for v in phantoms}
    for vid in split.train_ids:
        vol = by_id[vid]
        for s in range(vol.n_slices):
            sample = slice_sample(vol, s)
            has_test = any(sample.masks[c].any() for c in split.test_classes)
            assert has_test == ((vid, s) in excluded)


def test_folds_tile_volumes(phantoms):
    seen = []
    for fold in range(5):
        split = partition(phantoms, fold, 1, ["kidney"])
        assert not set(split.train_ids) & set(split.test_ids)
        seen.extend(split.test_ids)
    assert sorted(seen) == sorted(v.id for v in phantoms)
    assert len(seen) == len(set(seen))


def test_partition_errors(phantoms):
    with pytest.raises(ValidationError):
        partition(phantoms, 0, 1, ["pancreas"])
    with pytest.raises(ValidationError):
        partition(phantoms, 0, 3, "upper")
    with pytest.raises(ValidationError):
        partition(phantoms, 5, 1, "upper")
