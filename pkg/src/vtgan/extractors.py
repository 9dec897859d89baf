"""Fixed (non-trainable) convolutional feature extractors.

Used for the perceptual loss and for FID/KID feature clouds. An extractor is a
plain stack of 3x3 conv + ReLU layers, each optionally strided or followed by
2x2 max pooling, with a list of tapped layer names. The default is a
seeded random-weight network; a VGG-style network can be loaded from a
weight file whose meta block describes the layers::

    {"kind": "conv_extractor", "in_channels": 3,
     "layers": [{"name": "conv1_1", "stride": 1, "pool": false}, ...],
     "taps": ["conv1_2", "conv2_2", ...],
     "mean": [..] or null, "std": [..] or null}

with tensors ``<name>.w`` (3, 3, c_in, c_out) and ``<name>.b`` (c_out,).
"""

from __future__ import annotations

import hashlib
from pathlib import Path

import numpy as np

from . import functional as F
from .tensor import Tensor, as_tensor, concat, no_grad, relu
from .weights import load_weights, save_weights


class FeatureExtractor:
    def __init__(self, layers: list[dict], weights: dict[str, np.ndarray], taps: list[str], in_channels: int = 1,
                 mean=None, std=None, extractor_id: str | None = None):
        names = [layer["name"] for layer in layers]
        missing = [t for t in taps if t not in names]
        if missing:
            raise ValueError(f"tapped layers {missing} are not in the extractor")
        self.layers = layers
        self.taps = list(taps)
        self.in_channels = in_channels
        self.mean = None if mean is None else np.asarray(mean, dtype=np.float64)
        self.std = None if std is None else np.asarray(std, dtype=np.float64)
        self._w = {k: Tensor(v) for k, v in weights.items()}
        self.extractor_id = extractor_id or self._fingerprint()

    def _fingerprint(self) -> str:
        h = hashlib.sha256()
        for k in sorted(self._w):
            h.update(k.encode())
            h.update(self._w[k].data.tobytes())
        return h.hexdigest()[:16]

    @property
    def num_taps(self) -> int:
        return len(self.taps)

    def _prepare(self, images) -> Tensor:
        x = as_tensor(images)
        if x.ndim == 3:
            x = x.reshape(1, *x.shape)
        c = x.shape[-1]
        if c != self.in_channels:
            if c == 1:
                x = concat([x] * self.in_channels, axis=-1)
            else:
                raise ValueError(f"extractor expects {self.in_channels} channels, got {c}")
        if self.mean is not None:
            x = (x - self.mean.astype(x.dtype)) / self.std.astype(x.dtype)
        return x

    def features(self, images) -> list[Tensor]:
        """Tapped activations, in layer order. Differentiable w.r.t. ``images``."""
        x = self._prepare(images)
        out = []
        for layer in self.layers:
            name = layer["name"]
            w = self._w[f"{name}.w"]
            if w.dtype != x.dtype:
                w = Tensor(w.data.astype(x.dtype))
            b = Tensor(self._w[f"{name}.b"].data.astype(x.dtype))
            x = relu(F.conv2d(x, w, b, stride=int(layer.get("stride", 1))))
            if layer.get("pool"):
                x = F.max_pool2d(x, 2)
            if name in self.taps:
                out.append(x)
        return out

    def pooled(self, images, batch: int = 16) -> np.ndarray:
        """Global-average-pooled last tap as an ``(N, d)`` array."""
        images = np.asarray(images)
        rows = []
        with no_grad():
            for i in range(0, len(images), batch):
                rows.append(F.global_avg_pool(self.features(images[i : i + batch])[-1]).data)
        return np.concatenate(rows, axis=0).astype(np.float64)

    def save(self, path: str | Path) -> None:
        meta = {
            "kind": "conv_extractor",
            "in_channels": self.in_channels,
            "layers": self.layers,
            "taps": self.taps,
            "mean": None if self.mean is None else self.mean.tolist(),
            "std": None if self.std is None else self.std.tolist(),
        }
        save_weights(path, {k: v.data for k, v in self._w.items()}, meta)

    @classmethod
    def load(cls, path: str | Path) -> "FeatureExtractor":
        arrays, meta = load_weights(path)
        if meta.get("kind") != "conv_extractor":
            raise ValueError(f"{path} is not a feature-extractor weight file")
        return cls(meta["layers"], arrays, meta["taps"], meta.get("in_channels", 1), meta.get("mean"), meta.get("std"))


def random_extractor(widths=(8, 16, 32), in_channels: int = 1, seed: int = 1234) -> FeatureExtractor:
    """Seeded random-weight strided CNN; every layer is tapped."""
    rng = np.random.default_rng(seed)
    layers, weights = [], {}
    cin = in_channels
    for i, cout in enumerate(widths):
        name = f"conv{i + 1}"
        layers.append({"name": name, "stride": 2, "pool": False})
        weights[f"{name}.w"] = rng.normal(0.0, np.sqrt(2.0 / (9 * cin)), size=(3, 3, cin, cout))
        weights[f"{name}.b"] = rng.normal(0.0, 0.1, size=cout)
        cin = cout
    return FeatureExtractor(layers, weights, [layer["name"] for layer in layers], in_channels,
                            extractor_id=f"random-{'-'.join(map(str, widths))}-s{seed}")


def perceptual_extractor(path: str = "") -> FeatureExtractor:
    return FeatureExtractor.load(path) if path else random_extractor((8, 16, 32))


def metric_extractor(path: str = "") -> FeatureExtractor:
    return FeatureExtractor.load(path) if path else random_extractor((16, 32, 64), seed=4321)
