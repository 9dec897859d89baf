import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vtgan.config import LossWeights, desk_gan
from vtgan.discriminators import build_discriminators
from vtgan.functional import softmax
from vtgan.extractors import FeatureExtractor, random_extractor
from vtgan.gradcheck import gradient_check
from vtgan.losses import (
    cce,
    combined_adversarial,
    embedding_feature_loss,
    hinge_d,
    hinge_g,
    mse,
    one_hot,
    perceptual,
    total_generator_objective,
)
from vtgan.tensor import ShapeError, Tensor

maps = arrays(np.float64, (2, 3, 4), elements=st.floats(-3, 3))


@pytest.mark.parametrize("real,fake,want", [(1.0, -1.0, 0.0), (0.0, 0.0, 2.0), (-1.0, 1.0, 4.0)])
def test_hinge_d_cases(real, fake, want):
    shape = (2, 8, 8)
    assert abs(hinge_d(np.full(shape, real), np.full(shape, fake)).item() - want) < 1e-6


@given(maps, maps)
def test_hinge_d_nonnegative_and_zero_iff_margins(real, fake):
    v = hinge_d(real, fake).item()
    assert v >= 0
    assert (v == 0) == bool(np.all(real >= 1) and np.all(fake <= -1))


def test_hinge_d_shape_mismatch():
    with pytest.raises(ShapeError):
        hinge_d(np.zeros((2, 3)), np.zeros((3, 2)))


@pytest.mark.parametrize("fake,want", [(np.ones(4), -1.0), (np.zeros(4), 0.0), (np.array([1.0, -1.0]), 0.0)])
def test_hinge_g_cases(fake, want):
    assert hinge_g(fake).item() == want


def test_combined_adversarial():
    assert combined_adversarial(2, -1, 10) == -8
    assert combined_adversarial(2.5, -1, 0) == 2.5
    assert combined_adversarial(0, 0, 10) == 0


def test_cce_cases():
    assert 0 <= cce([[1, 0]], [[1.0, 0.0]]).item() <= 1.2e-7
    assert abs(cce([[0, 1]], [[0.5, 0.5]]).item() - math.log(2)) < 1e-6
    assert abs(cce([[1, 0]], [[0.25, 0.75]]).item() - 1.3863) < 1e-4
    assert abs(cce([[1, 0]], [[0.25, 0.75]]).item() + math.log(0.25)) < 1e-12


def test_cce_batch_mean_and_errors():
    v = cce(one_hot([1, 0]), [[0.5, 0.5], [0.25, 0.75]]).item()
    assert abs(v - (math.log(2) - math.log(0.25)) / 2) < 1e-12
    with pytest.raises(ValueError):
        cce([[1, 0]], [[0.7, 0.7]])
    with pytest.raises(ShapeError):
        cce([[1, 0, 0]], [[0.5, 0.5]])


def test_one_hot():
    np.testing.assert_array_equal(one_hot([1, 0, 1]), [[0, 1], [1, 0], [0, 1]])


def test_mse_cases(rng):
    r = rng.normal(size=(2, 5, 5, 1))
    assert mse(r, r).item() == 0
    assert abs(mse(r + 1, r).item() - 1) < 1e-12
    assert mse(np.array([0.0, 2.0]), np.array([1.0, 0.0])).item() == 2.5
    with pytest.raises(ShapeError):
        mse(np.zeros(2), np.zeros(3))


def identity_extractor():
    w = np.zeros((3, 3, 1, 1))
    w[1, 1, 0, 0] = 1.0
    return FeatureExtractor([{"name": "id"}], {"id.w": w, "id.b": np.zeros(1)}, ["id"])


def test_perceptual_identity_extractor_is_mae(rng):
    a, b = rng.uniform(0, 1, (2, 8, 8, 1)), rng.uniform(0, 1, (2, 8, 8, 1))
    assert abs(perceptual(a, b, identity_extractor()).item() - np.abs(a - b).mean()) < 1e-12


def test_perceptual_zero_and_monotone(rng):
    fx = random_extractor()
    real = rng.uniform(-1, 1, (2, 16, 16, 1))
    d = rng.choice([-1.0, 1.0], size=real.shape)
    assert perceptual(real, real, fx).item() == 0
    small, big = perceptual(real + 0.01 * d, real, fx).item(), perceptual(real + 0.1 * d, real, fx).item()
    assert 0 < small < big


def test_perceptual_gradient(rng):
    fx = random_extractor((4, 6))
    fake = Tensor(rng.uniform(-1, 1, (1, 8, 8, 1)), requires_grad=True)
    real = rng.uniform(-1, 1, (1, 8, 8, 1))
    assert gradient_check(lambda: perceptual(fake, real, fx), [fake]) < 1e-4


@pytest.fixture(scope="module")
def disc():
    return build_discriminators(desk_gan(), seed=5).coarse


def test_embedding_feature_loss(disc, rng):
    x, y = rng.uniform(-1, 1, (1, 32, 32, 3)), rng.uniform(-1, 1, (1, 32, 32, 1))
    assert embedding_feature_loss(x, y, y, disc).item() == 0
    assert embedding_feature_loss(x, y, -y, disc).item() > 0
    assert len(disc.embedding_features(x, y)) == 9


def test_embedding_feature_loss_gradient_reaches_only_fake(disc, rng):
    x, y = rng.uniform(-1, 1, (1, 32, 32, 3)), rng.uniform(-1, 1, (1, 32, 32, 1))
    g = Tensor(rng.uniform(-1, 1, (1, 32, 32, 1)), requires_grad=True)
    yt = Tensor(y, requires_grad=True)
    embedding_feature_loss(x, yt, g, disc).backward()
    assert yt.grad is None and g.grad is not None and np.any(g.grad != 0)
    disc.store.zero_grad()
    assert gradient_check(lambda: embedding_feature_loss(x, y, g, disc), [g], max_coords=10) < 1e-4
    disc.store.zero_grad()


def test_loss_gradients_on_outputs(rng):
    f = Tensor(rng.normal(size=(2, 3, 3)), requires_grad=True)
    r = rng.normal(size=(2, 3, 3))
    assert gradient_check(lambda: mse(f, r), [f]) < 1e-4
    assert gradient_check(lambda: hinge_d(f * 0.3, r * 0.3), [f]) < 1e-4
    assert gradient_check(lambda: hinge_g(f), [f]) < 1e-4
    logits = Tensor(rng.normal(size=(3, 2)), requires_grad=True)
    assert gradient_check(lambda: cce(one_hot([0, 1, 1]), softmax(logits, -1)), [logits]) < 1e-4


def test_total_objective_weighted_sum(rng):
    w = LossWeights()
    parts = dict(zip(("adv", "mse", "perc", "ef"), rng.normal(size=4)))
    want = 10 * parts["adv"] + 10 * parts["mse"] + 10 * parts["perc"] + 1 * parts["ef"]
    assert abs(total_generator_objective(parts, w) - want) < 1e-6
    assert total_generator_objective(dict.fromkeys(parts, 0.0), w) == 0
    doubled = dict(parts, mse=2 * parts["mse"])
    assert abs(total_generator_objective(doubled, w) - total_generator_objective(parts, w) - 10 * parts["mse"]) < 1e-6
    with pytest.raises(KeyError):
        total_generator_objective({"adv": 1.0}, w)


@given(st.floats(0, 20), st.floats(0, 20), st.floats(-5, 5), st.floats(-5, 5))
def test_total_objective_linear_in_each_weight(l1, l2, mse_part, perc):
    parts = {"adv": 0.7, "mse": mse_part, "perc": perc, "ef": -0.2}
    a = total_generator_objective(parts, LossWeights(mse=l1))
    b = total_generator_objective(parts, LossWeights(mse=l2))
    assert abs((a - b) - (l1 - l2) * mse_part) < 1e-9 * max(1.0, abs(a), abs(b))


def test_total_objective_on_tensors(rng):
    parts = {k: Tensor(np.array(v)) for k, v in zip(("adv", "mse", "perc", "ef"), rng.normal(size=4))}
    t = total_generator_objective(parts, LossWeights())
    assert isinstance(t, Tensor)
