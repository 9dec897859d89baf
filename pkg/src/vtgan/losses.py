"""Objective terms: hinge adversarial losses, cross-entropy, MSE, perceptual
and embedding-feature losses, and the weighted generator objective.

Batch expectations are arithmetic means throughout.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .config import LossWeights
from .extractors import FeatureExtractor
from .tensor import ShapeError, Tensor, absolute, as_tensor, clip, log, no_grad, relu, square

CCE_CLIP = 1e-7


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def hinge_d(real_map, fake_map) -> Tensor:
    """Discriminator hinge loss: mean(relu(1 - real)) + mean(relu(1 + fake))."""
    real_map, fake_map = as_tensor(real_map), as_tensor(fake_map)
    _same_shape(real_map, fake_map, "hinge_d")
    return relu(1.0 - real_map).mean() + relu(1.0 + fake_map).mean()


def hinge_g(fake_map) -> Tensor:
    return -as_tensor(fake_map).mean()


def combined_adversarial(d_loss, g_loss, lambda_adv: float):
    return d_loss + lambda_adv * g_loss


def one_hot(labels, num_classes: int = 2) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels.reshape(-1)] = 1.0
    return out


def cce(y_true, y_pred, tol: float = 1e-4) -> Tensor:
    """Categorical cross-entropy on probabilities, clipped before the log."""
    y_pred = as_tensor(y_pred)
    yt = np.asarray(y_true, dtype=y_pred.dtype)
    if yt.shape != y_pred.shape:
        raise ShapeError(f"cce: labels {yt.shape} vs predictions {y_pred.shape}")
    p = y_pred.data
    if np.any(p < -tol) or np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError("cce: predictions are not on the probability simplex")
    logp = log(clip(y_pred, CCE_CLIP, 1.0 - CCE_CLIP))
    per_sample = -(logp * Tensor(yt)).sum(axis=-1)
    return per_sample.mean()


def mse(fake, real) -> Tensor:
    fake, real = as_tensor(fake), as_tensor(real)
    _same_shape(fake, real, "mse")
    return square(fake - real).mean()


def mean_abs_diff(a: Tensor, b: Tensor) -> Tensor:
    _same_shape(a, b, "feature distance")
    return absolute(a - b).mean()


def perceptual(fake, real, extractor: FeatureExtractor) -> Tensor:
    """Mean over tapped layers of the per-element L1 distance of features."""
    fake, real = as_tensor(fake), as_tensor(real)
    _same_shape(fake, real, "perceptual")
    with no_grad():
        ref = extractor.features(real.detach())
    out = extractor.features(fake)
    total = mean_abs_diff(out[0], ref[0])
    for a, b in zip(out[1:], ref[1:]):
        total = total + mean_abs_diff(a, b)
    return total * (1.0 / len(out))


def feature_matching(fake_features: Sequence[Tensor], real_features: Sequence[Tensor]) -> Tensor:
    """Mean over feature taps of the L1 distance; real features act as constants."""
    if len(fake_features) != len(real_features):
        raise ValueError("feature lists differ in length")
    total = None
    for a, b in zip(fake_features, real_features):
        term = mean_abs_diff(a, b.detach())
        total = term if total is None else total + term
    return total * (1.0 / len(fake_features))


def embedding_feature_loss(x, y, g_x, discriminator, ctx=None) -> Tensor:
    """L1 distance between discriminator embedding features of (x, y) and (x, G(x)).

    Gradients reach the generator through ``g_x`` only; the real-pair features
    are computed without a graph.
    """
    with no_grad():
        real = discriminator.embedding_features(x, y, ctx)
    fake = discriminator.embedding_features(x, g_x, ctx)
    return feature_matching(fake, real)


GENERATOR_PARTS = ("adv", "mse", "perc", "ef")


def total_generator_objective(parts: Mapping[str, Tensor | float], weights: LossWeights):
    """lambda_adv*adv + lambda_mse*mse + lambda_perc*perc + lambda_ef*ef."""
    missing = [k for k in GENERATOR_PARTS if k not in parts]
    if missing:
        raise KeyError(f"missing generator loss parts: {missing}")
    return (
        weights.adv * parts["adv"]
        + weights.mse * parts["mse"]
        + weights.perc * parts["perc"]
        + weights.ef * parts["ef"]
    )
