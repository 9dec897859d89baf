import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import kid_triple_loop
from vtgan.data import DataError, write_png
from vtgan.extractors import random_extractor
from vtgan.metrics import (
    CONDITIONS,
    ConfusionCounts,
    FeatureCloud,
    UndefinedMetricError,
    classification_metrics,
    evaluate_run,
    fid,
    kid,
)


def standardized(rng, n, d):
    """n x d sample with sample mean exactly 0 and sample covariance (n-1 normalizer) exactly I."""
    z = rng.normal(size=(n, d))
    z -= z.mean(axis=0)
    cov = z.T @ z / (n - 1)
    vals, vecs = np.linalg.eigh(cov)
    return z @ (vecs / np.sqrt(vals)) @ vecs.T


def test_fid_identical_clouds_is_zero(rng):
    a = FeatureCloud(rng.normal(size=(40, 6)))
    assert abs(fid(a, a)) < 1e-6


def test_fid_equal_covariance_gives_mean_gap(rng):
    z = standardized(rng, 50, 5)
    shift = np.zeros(5)
    shift[0] = 1.0
    assert abs(fid(FeatureCloud(z), FeatureCloud(z + shift)) - 1.0) < 1e-6
    w = standardized(rng, 70, 5)  # a different sample with the same moments
    assert abs(fid(FeatureCloud(z), FeatureCloud(w + shift)) - 1.0) < 1e-6


def test_fid_one_dimensional_closed_form(rng):
    z = standardized(rng, 30, 1)[:, 0]
    assert abs(fid(FeatureCloud(z), FeatureCloud(3.0 + 2.0 * z)) - 10.0) < 1e-6


@given(arrays(np.float64, (12, 3), elements=st.floats(-5, 5)), arrays(np.float64, (9, 3), elements=st.floats(-5, 5)))
def test_fid_symmetric_and_nonnegative(x, y):
    a, b = FeatureCloud(x), FeatureCloud(y)
    ab, ba = fid(a, b), fid(b, a)
    assert ab >= -1e-6
    assert abs(ab - ba) <= 1e-6 * max(1.0, abs(ab))


def test_cloud_validation(rng):
    with pytest.raises(ValueError):
        fid(FeatureCloud(rng.normal(size=(5, 3))), FeatureCloud(rng.normal(size=(5, 4))))
    with pytest.raises(ValueError):
        fid(FeatureCloud(rng.normal(size=(5, 3)), "a"), FeatureCloud(rng.normal(size=(5, 3)), "b"))
    with pytest.raises(ValueError):
        kid(FeatureCloud(rng.normal(size=(1, 3))), FeatureCloud(rng.normal(size=(5, 3))))
    with pytest.raises(ValueError):
        FeatureCloud(np.array([[np.nan, 1.0]]))


def test_kid_matches_triple_loop_four_point():
    x = np.array([[0.3], [-1.2], [2.0], [0.7]])
    y = np.array([[1.1], [0.0], [-0.4], [0.9]])
    assert abs(kid(FeatureCloud(x), FeatureCloud(y)) - kid_triple_loop(x.tolist(), y.tolist())) < 1e-12


@pytest.mark.parametrize("m,n,d", [(4, 4, 1), (5, 7, 3), (6, 6, 4)])
def test_kid_matches_triple_loop(rng, m, n, d):
    x, y = rng.normal(size=(m, d)), rng.normal(0.3, 1.2, size=(n, d))
    assert abs(kid(FeatureCloud(x), FeatureCloud(y)) - kid_triple_loop(x.tolist(), y.tolist())) < 1e-12


def test_kid_zero_cases(rng):
    c = np.tile(rng.normal(size=(1, 5)), (6, 1))
    assert kid(FeatureCloud(c), FeatureCloud(c[:4])) == 0.0
    x = rng.normal(size=(20, 5))
    assert abs(kid(FeatureCloud(x), FeatureCloud(x))) < 1e-9


@given(arrays(np.float64, (6, 2), elements=st.floats(-3, 3)), arrays(np.float64, (6, 2), elements=st.floats(-3, 3)))
def test_kid_symmetric(x, y):
    assert abs(kid(FeatureCloud(x), FeatureCloud(y)) - kid(FeatureCloud(y), FeatureCloud(x))) < 1e-9


def test_kid_unbiased_for_equal_distributions():
    r = np.random.default_rng(2024)
    vals = np.array([kid(FeatureCloud(r.normal(size=(30, 4))), FeatureCloud(r.normal(size=(30, 4)))) for _ in range(100)])
    se = vals.std(ddof=1) / np.sqrt(len(vals))
    assert abs(vals.mean()) < 3 * se


@pytest.mark.parametrize(
    "counts,want",
    [((30, 2, 18, 6), (85.7, 83.3, 90.0)), ((26, 2, 18, 10), (78.6, 72.2, 90.0)), ((36, 0, 20, 0), (100.0, 100.0, 100.0))],
)
def test_classification_metrics_reference_counts(counts, want):
    tp, fp, tn, fn = counts
    got = classification_metrics(ConfusionCounts(tp=tp, fp=fp, tn=tn, fn=fn))
    assert tuple(round(100 * v, 1) for v in got) == want


def test_confusion_from_labels_and_errors():
    c = ConfusionCounts.from_labels(["Normal", "Normal", "Abnormal", "Abnormal"], ["Normal", "Abnormal", "Normal", "Abnormal"])
    assert (c.tp, c.fn, c.fp, c.tn, c.total) == (1, 1, 1, 1, 4)
    with pytest.raises(UndefinedMetricError):
        classification_metrics(ConfusionCounts(3, 0, 0, 0))
    with pytest.raises(ValueError):
        ConfusionCounts(-1, 0, 0, 0)


@pytest.fixture
def image_dirs(tmp_path, rng):
    gen, ref, fundus = tmp_path / "gen", tmp_path / "ref", tmp_path / "fundus"
    for d in (gen, ref, fundus):
        d.mkdir()
    rows = []
    for i in range(6):
        name = f"p{i}_q{i % 4}.png"
        img = np.tanh(rng.normal(size=(32, 32, 1)))
        write_png(gen / name, img)
        write_png(ref / name, img)
        write_png(fundus / name, rng.uniform(-1, 1, (32, 32, 3)))
        rows.append({"patient_id": f"p{i}", "label": ("Normal", "Abnormal")[i % 2]})
    with open(tmp_path / "labels.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, ["patient_id", "label"])
        w.writeheader()
        w.writerows(rows)
    return tmp_path


def test_evaluate_identical_dirs(image_dirs):
    fx = random_extractor((4, 8), seed=3)
    report = evaluate_run(image_dirs / "gen", image_dirs / "ref", extractor=fx)
    assert [r.condition for r in report.rows] == list(CONDITIONS)
    none = report.row("none")
    assert abs(none.fid) < 1e-6 and abs(none.kid) < 1e-9 and none.n == 6 and none.source == "flat"
    assert report.row("blur").source == "distorted-output" and report.row("blur").fid > 0
    again = evaluate_run(image_dirs / "gen", image_dirs / "ref", extractor=fx)
    assert again.to_jsonl() == report.to_jsonl()
    report.write(image_dirs / "out")
    assert "condition" in (image_dirs / "out" / "report.txt").read_text()
    assert len((image_dirs / "out" / "report.jsonl").read_text().splitlines()) == 1 + len(CONDITIONS)


def test_evaluate_with_classifier_and_condition_dirs(image_dirs):
    (image_dirs / "gen" / "noise").mkdir()
    for p in (image_dirs / "gen").glob("*.png"):
        (image_dirs / "gen" / "noise" / p.name).write_bytes(p.read_bytes())
    always_normal = lambda f, a: np.ones(len(f))  # noqa: E731
    report = evaluate_run(
        image_dirs / "gen", image_dirs / "ref", image_dirs / "labels.csv", random_extractor((4, 8)),
        classifier=always_normal, fundus_dir=image_dirs / "fundus", conditions=("none", "noise"),
    )
    row = report.row("noise")
    assert row.source == "noise/" and abs(row.fid) < 1e-6
    assert row.accuracy == 0.5 and row.sensitivity == 1.0 and row.specificity == 0.0


def test_evaluate_errors(image_dirs):
    (image_dirs / "gen" / "p0_q0.png").unlink()
    with pytest.raises(DataError, match="5 images"):
        evaluate_run(image_dirs / "gen", image_dirs / "ref", extractor=random_extractor((4,)))
    (image_dirs / "gen" / "p0_q0.png").write_bytes(b"junk")
    with pytest.raises(DataError, match="unreadable"):
        evaluate_run(image_dirs / "gen", image_dirs / "ref", extractor=random_extractor((4,)))


def test_sharp_row_counts():
    acc, sens, spec = classification_metrics(ConfusionCounts(tp=25, fp=2, tn=18, fn=11))
    assert (round(100 * sens, 1), round(100 * spec, 1)) == (69.4, 90.0)
    # the reference accuracy 76.7 is 43/56 truncated; rounding gives 76.8
    assert np.floor(1000 * acc) / 10 == 76.7 and round(100 * acc, 1) == 76.8
