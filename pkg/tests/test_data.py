import csv
from collections import Counter

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vtgan.config import DistortionConfig
from vtgan.data import (
    AUGMENTATIONS,
    DataError,
    FundusAngioPair,
    PairDataset,
    augment,
    augment_pair,
    balance_classes,
    balance_plan,
    build_manifest,
    extract_crops,
    quadrant_crops,
    read_manifest,
    read_png,
    split_patients,
    to_uint8,
    to_unit,
    write_manifest,
    write_png,
)
from vtgan.distortions import KINDS, RANGES, DistortionSpec, default_spec, distort
from vtgan.resample import lanczos_resize


def source(rng, h=576, w=720):
    return rng.uniform(-1, 1, (h, w, 3)), rng.uniform(-1, 1, (h, w, 1))


def test_seventeen_sources_give_850_crops(rng):
    total = 0
    for i in range(17):
        f, a = source(rng)
        crops = extract_crops(f, a, "Normal", f"p{i}", crop=512, count=50, seed=0)
        total += len(crops)
        for c in crops[:5]:
            r, col = c.crop_origin
            np.testing.assert_array_equal(c.fundus, f[r : r + 512, col : col + 512])
            np.testing.assert_array_equal(c.angio, a[r : r + 512, col : col + 512])
        assert all(0 <= c.crop_origin[0] <= 64 and 0 <= c.crop_origin[1] <= 208 for c in crops)
        del crops  # 50 float64 crops are ~420 MB
    assert total == 850


def test_crop_equal_to_source_repeats_origin(rng):
    f, a = source(rng, 64, 64)
    crops = extract_crops(f, a, "Abnormal", crop=64, count=5)
    assert [c.crop_origin for c in crops] == [(0, 0)] * 5
    assert all(np.array_equal(c.fundus, f) for c in crops)


def test_crop_errors(rng):
    f, a = source(rng, 64, 64)
    with pytest.raises(DataError):
        extract_crops(f, a, "Normal", crop=65)
    with pytest.raises(DataError):
        extract_crops(f, a[:32], "Normal", crop=16)


def test_crops_are_seeded_per_patient(rng):
    f, a = source(rng, 80, 90)
    o = lambda pid, seed: [c.crop_origin for c in extract_crops(f, a, "Normal", pid, 32, 10, seed)]  # noqa: E731
    assert o("p1", 0) == o("p1", 0)
    assert o("p1", 0) != o("p2", 0)
    assert o("p1", 0) != o("p1", 1)


def test_fourteen_pairs_give_56_quadrant_crops(rng):
    labels = ["Abnormal"] * 5 + ["Normal"] * 9
    labels_out = []
    for i, lab in enumerate(labels):
        f, a = source(rng)
        q = quadrant_crops(f, a, lab, f"t{i}", crop=512)
        corners = [q[0].fundus[0, 0], q[1].fundus[0, -1], q[2].fundus[-1, 0], q[3].fundus[-1, -1]]
        np.testing.assert_array_equal(corners, [f[0, 0], f[0, -1], f[-1, 0], f[-1, -1]])
        labels_out += [c.label for c in q]
    assert len(labels_out) == 56
    assert Counter(labels_out) == {"Abnormal": 20, "Normal": 36}


def test_quadrants_of_exact_size_source_are_identical(rng):
    f, a = source(rng, 512, 512)
    q = quadrant_crops(f, a, "Normal")
    assert all(np.array_equal(c.fundus, f) and np.array_equal(c.angio, a) for c in q)


def tiny_pair(label, i):
    f = np.full((4, 4, 3), -1.0)
    a = np.full((4, 4, 1), -1.0)
    f[0, 1] = 1.0
    a[0, 1] = 1.0
    return FundusAngioPair(f, a, label, f"p{i}")


def test_balance_500_350():
    pairs = [tiny_pair("Abnormal", i) for i in range(500)] + [tiny_pair("Normal", i) for i in range(350)]
    out = balance_classes(pairs, seed=0)
    assert Counter(p.label for p in out) == {"Abnormal": 500, "Normal": 500}
    extra = out[850:]
    assert all(p.augmentation in AUGMENTATIONS for p in extra)
    for p in extra:
        # the marker pixel lands in the same place in both images
        np.testing.assert_array_equal(p.fundus[..., 0] > 0, p.angio[..., 0] > 0)
    assert len({p.augmentation for p in extra}) > 1


def test_balance_is_noop_when_balanced_and_rejects_low_target():
    pairs = [tiny_pair("Abnormal", 0), tiny_pair("Normal", 1)]
    assert balance_classes(pairs) == pairs
    assert balance_plan(["Normal"] * 3 + ["Abnormal"], 3, seed=1) == balance_plan(["Normal"] * 3 + ["Abnormal"], 3, seed=1)
    with pytest.raises(DataError):
        balance_plan(["Normal"] * 3, 2)


@given(st.sampled_from(AUGMENTATIONS), st.integers(0, 3), st.integers(0, 4))
def test_augmentations_are_invertible_permutations(name, r, c):
    img = np.zeros((4, 5, 1))
    img[r, c] = 1.0
    if "rot90" in name or "rot270" in name:
        img = np.zeros((5, 5, 1))
        img[r, c] = 1.0
    out = augment(img, name)
    assert out.sum() == 1.0
    inverse = {"rot90": "rot270", "rot270": "rot90"}.get(name, name)
    np.testing.assert_array_equal(augment(out, inverse), img)


def test_augment_pair_keeps_label_and_rejects_unknown():
    p = augment_pair(tiny_pair("Normal", 0), "flip")
    assert p.label == "Normal" and p.fundus[0, 2, 0] == 1.0 and p.angio[0, 2, 0] == 1.0
    with pytest.raises(DataError):
        augment(np.zeros((2, 2, 1)), "shear")


def test_pair_validation():
    with pytest.raises(DataError):
        FundusAngioPair(np.zeros((4, 4, 3)), np.zeros((4, 5, 1)), "Normal")
    with pytest.raises(DataError):
        FundusAngioPair(np.zeros((4, 4, 3)), np.zeros((4, 4, 1)), "Sick")
    assert tiny_pair("Normal", 0).label_index == 1


def test_png_roundtrip(tmp_path, rng):
    img = to_unit(rng.integers(0, 256, (6, 7, 3)).astype(np.uint8))
    write_png(tmp_path / "a.png", img)
    np.testing.assert_allclose(read_png(tmp_path / "a.png", 3), img, atol=1e-12)
    np.testing.assert_array_equal(to_uint8(np.array([-1.0, 0.0, 1.0])), [0, 128, 255])
    (tmp_path / "bad.png").write_bytes(b"nope")
    with pytest.raises(DataError):
        read_png(tmp_path / "bad.png", 3)


def make_source_dir(root, n, rng, size=(40, 48)):
    rows = []
    for i in range(n):
        pid = f"s{i:02d}"
        f, a = source(rng, *size)
        write_png(root / f"{pid}_fundus.png", f)
        write_png(root / f"{pid}_fa.png", a)
        rows.append({"patient_id": pid, "label": ("Abnormal", "Normal")[i % 3 != 0]})
    with open(root / "labels.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["patient_id", "label"])
        w.writeheader()
        w.writerows(rows)
    return root


def test_manifest_build_roundtrip_and_dataset(tmp_path, rng):
    data = make_source_dir(tmp_path, 6, rng)
    records = build_manifest(data, crop=32, crops_per_image=5, test_fraction=0.34, seed=3)
    train_ids = {r["patient_id"] for r in records if r["split"] == "train"}
    test_ids = {r["patient_id"] for r in records if r["split"] == "test"}
    assert train_ids and test_ids and not train_ids & test_ids
    assert sum(r["split"] == "test" for r in records) == 4 * len(test_ids)
    train_labels = Counter(r["label"] for r in records if r["split"] == "train")
    assert len(set(train_labels.values())) == 1
    write_manifest(tmp_path / "m.jsonl", records)
    assert read_manifest(tmp_path / "m.jsonl") == records
    assert build_manifest(data, crop=32, crops_per_image=5, test_fraction=0.34, seed=3) == records

    ds = PairDataset.from_manifest(tmp_path / "m.jsonl", data, "train")
    assert len(ds) == sum(train_labels.values())
    f, a, y = ds.batch([0, len(ds) - 1])
    assert f.shape == (2, 32, 32, 3) and a.shape == (2, 32, 32, 1) and set(y) <= {0, 1}
    rec = ds.records[0]
    full = read_png(data / f"{rec['patient_id']}_fundus.png", 3)
    r, c = rec["origin"]
    np.testing.assert_array_equal(ds[0].fundus, full[r : r + 32, c : c + 32])


def test_manifest_errors(tmp_path, rng):
    data = make_source_dir(tmp_path, 2, rng)
    (data / "s01_fa.png").unlink()
    with pytest.raises(DataError, match="s01_fa.png"):
        build_manifest(data, crop=32)
    (tmp_path / "bad.jsonl").write_text('{"patient_id": "x"}\n')
    with pytest.raises(DataError):
        read_manifest(tmp_path / "bad.jsonl")


@given(st.lists(st.text("abcdef", min_size=1, max_size=4), min_size=2, max_size=20, unique=True), st.integers(0, 50))
def test_patient_split_is_disjoint_and_complete(patients, seed):
    train, test = split_patients(patients, 0.45, seed)
    assert not set(train) & set(test)
    assert sorted(train + test) == sorted(patients)
    assert train and test


# --- distortions --------------------------------------------------------------------


def smooth_image(size=64):
    yy, xx = np.mgrid[0:size, 0:size] / (size - 1)
    return (0.6 * np.sin(2 * np.pi * xx) * np.cos(np.pi * yy) + 0.3 * (xx - yy))[..., None]


@pytest.mark.parametrize("kind", KINDS)
def test_zero_strength_is_identity(kind, rng):
    img = rng.uniform(-1, 1, (16, 20, 3))
    assert np.max(np.abs(distort(img, DistortionSpec(kind, 0.0)) - img)) <= 1e-6


@given(st.floats(0.1, 20), st.floats(-1, 1))
def test_blur_preserves_constants(sigma, value):
    img = np.full((12, 12, 2), value)
    np.testing.assert_allclose(distort(img, DistortionSpec("blur", sigma)), img, atol=1e-12)


@pytest.mark.parametrize("degrees", [30.0, -45.0, 90.0])
def test_whirl_round_trip(degrees):
    img = smooth_image()
    back = distort(distort(img, DistortionSpec("whirl", degrees)), DistortionSpec("whirl", -degrees))
    assert np.mean(np.abs(back - img)) / (img.max() - img.min()) < 0.02


@pytest.mark.parametrize("kind", KINDS)
def test_default_distortions_change_image_and_keep_shape(kind):
    img = np.repeat(smooth_image(32), 3, axis=-1)
    out = distort(img, default_spec(kind, DistortionConfig(), seed=1))
    assert out.shape == img.shape
    assert np.max(np.abs(out - img)) > 1e-4


def test_distortion_errors():
    with pytest.raises(ValueError):
        distort(np.zeros((4, 4, 1)), DistortionSpec("swirl", 1.0))
    for kind, (lo, hi) in RANGES.items():
        with pytest.raises(ValueError):
            distort(np.zeros((4, 4, 1)), DistortionSpec(kind, hi + 1.0))


def test_noise_is_seeded():
    img = np.zeros((8, 8, 1))
    a = distort(img, DistortionSpec("noise", 0.2, seed=1))
    np.testing.assert_array_equal(a, distort(img, DistortionSpec("noise", 0.2, seed=1)))
    assert not np.array_equal(a, distort(img, DistortionSpec("noise", 0.2, seed=2)))


# --- Lanczos ------------------------------------------------------------------------


def test_lanczos_shapes_and_constants():
    img = np.full((1, 512, 512, 3), 0.37)
    out = lanczos_resize(img, 2, "down")
    assert out.shape == (1, 256, 256, 3)
    np.testing.assert_allclose(out, 0.37, atol=1e-12)
    np.testing.assert_allclose(lanczos_resize(np.full((8, 6, 1), -0.5), 2, "up"), -0.5, atol=1e-12)


def test_lanczos_downsampled_cosine():
    n = 128
    x = np.arange(n)
    k = 3  # cycles across the image: far below the half-resolution Nyquist limit
    img = np.cos(2 * np.pi * k * (x[:, None] + 0.5) / n) * np.cos(2 * np.pi * 2 * (x[None, :] + 0.5) / n)
    out = lanczos_resize(img[..., None], 2, "down")[..., 0]
    # output pixel i covers input pixels 2i, 2i+1, i.e. its centre is at input coordinate 2i + 0.5
    c = 2 * np.arange(n // 2) + 1.0
    want = np.cos(2 * np.pi * k * c[:, None] / n) * np.cos(2 * np.pi * 2 * c[None, :] / n)
    assert np.sqrt(np.mean((out - want) ** 2)) < 0.01


def test_lanczos_errors():
    with pytest.raises(ValueError):
        lanczos_resize(np.zeros((5, 4, 1)), 2, "down")
    with pytest.raises(ValueError):
        lanczos_resize(np.zeros((4, 4, 1)), 2, "sideways")
