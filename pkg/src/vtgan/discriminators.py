"""Vision-transformer Markovian discriminators.

The fundus and angiogram are concatenated along channels, cut into a grid of
non-overlapping patches, linearly embedded, given learned position
embeddings and run through a stack of pre-norm encoder blocks. Two heads read
the final tokens:

* adversarial head: the ``T x D`` token matrix viewed as a one-channel plane,
  a 3x3 same-padded convolution and tanh, giving a ``T x D`` real/fake map;
* classification head: mean-pooled tokens, dense -> GELU -> dense to class
  logits, then softmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .blocks import BlockConfig, Conv, Dense, ForwardContext, Layer, TransformerEncoderBlock
from .config import GanConfig
from .params import ParameterStore
from .tensor import ShapeError, Tensor, as_tensor, concat


@dataclass
class PatchSequence:
    tokens: Tensor  # (B, T, L) raw patches or (B, T, D) embeddings
    grid: tuple[int, int]
    source_resolution: int


@dataclass
class VtOutput:
    adv_map: Tensor  # (B, T, D) in [-1, 1]
    class_logits: Tensor  # (B, num_classes)
    class_probs: Tensor
    features: list[Tensor] | None = None


def patchify(image, patch: int) -> PatchSequence:
    """Cut ``(B, H, W, C)`` (or ``(H, W, C)``) into row-major flattened patches."""
    x = as_tensor(image)
    batched = x.ndim == 4
    if not batched:
        x = x.reshape(1, *x.shape)
    b, h, w, c = x.shape
    if h % patch or w % patch:
        raise ShapeError(f"image {h}x{w} is not divisible into {patch}x{patch} patches")
    rows, cols = h // patch, w // patch
    t = x.reshape(b, rows, patch, cols, patch, c).transpose(0, 1, 3, 2, 4, 5).reshape(b, rows * cols, patch * patch * c)
    if not batched:
        t = t.reshape(rows * cols, patch * patch * c)
    return PatchSequence(t, (rows, cols), h)


def unpatchify(seq: PatchSequence, channels: int) -> Tensor:
    t = seq.tokens
    batched = t.ndim == 3
    if not batched:
        t = t.reshape(1, *t.shape)
    rows, cols = seq.grid
    patch = int(round((t.shape[-1] // channels) ** 0.5))
    b = t.shape[0]
    x = t.reshape(b, rows, cols, patch, patch, channels).transpose(0, 1, 3, 2, 4, 5)
    x = x.reshape(b, rows * patch, cols * patch, channels)
    return x if batched else x.reshape(rows * patch, cols * patch, channels)


def embed(patches: PatchSequence, projection: Tensor, positions: Tensor) -> PatchSequence:
    """tokens = patches @ projection + positions."""
    t = patches.tokens
    if projection.shape[0] != t.shape[-1]:
        raise ShapeError(f"projection {projection.shape} does not accept patches of length {t.shape[-1]}")
    if positions.shape != (t.shape[-2], projection.shape[1]):
        raise ShapeError(f"position table {positions.shape} does not match {t.shape[-2]} tokens")
    return PatchSequence(F.dense(t, projection) + positions, patches.grid, patches.source_resolution)


class VisionTransformerDiscriminator(Layer):
    def __init__(self, store: ParameterStore, cfg: GanConfig, image_size: int, prefix: str, rng: np.random.Generator):
        super().__init__(store, prefix)
        self.image_size = image_size
        self.patch = image_size // cfg.patch_grid
        self.tokens = cfg.patch_grid * cfg.patch_grid
        d = cfg.latent_dim
        in_dim = self.patch * self.patch * 4
        self.add("embed.proj", rng.normal(0.0, (1.0 / in_dim) ** 0.5, size=(in_dim, d)))
        self.add("embed.pos", rng.normal(0.0, 0.02, size=(self.tokens, d)))
        bc = BlockConfig(
            d, d, latent_dim=d, heads=cfg.heads, mlp_sizes=tuple(cfg.mlp_sizes), dropout_rate=cfg.dropout
        )
        self.encoders = [TransformerEncoderBlock(store, f"{prefix}.enc{i}", bc, rng) for i in range(cfg.encoder_blocks)]
        self.adv_conv = Conv(store, f"{prefix}.adv_head.conv", 1, 1, rng, kernel=3)
        self.cls_hidden = Dense(store, f"{prefix}.cls_head.dense0", d, cfg.mlp_sizes[0], rng)
        self.cls_out = Dense(store, f"{prefix}.cls_head.dense1", cfg.mlp_sizes[0], cfg.num_classes, rng)

    def _tokens(self, fundus, angio) -> Tensor:
        fundus, angio = as_tensor(fundus), as_tensor(angio)
        if fundus.ndim != 4 or angio.ndim != 4 or fundus.shape[:3] != angio.shape[:3]:
            raise ShapeError(f"fundus {fundus.shape} and angiogram {angio.shape} must share batch and spatial size")
        if fundus.shape[1:] != (self.image_size, self.image_size, 3) or angio.shape[-1] != 1:
            raise ShapeError(
                f"discriminator expects {self.image_size}x{self.image_size} fundus(3)+angiogram(1), "
                f"got {fundus.shape} and {angio.shape}"
            )
        pair = concat([fundus, angio], axis=-1)
        seq = embed(patchify(pair, self.patch), self.p("embed.proj"), self.p("embed.pos"))
        return seq.tokens

    def embedding_features(self, fundus, angio, ctx: ForwardContext | None = None) -> list[Tensor]:
        """Post-embedding tokens followed by the output of every encoder block."""
        ctx = ctx or ForwardContext.eval()
        feats = [self._tokens(fundus, angio)]
        for enc in self.encoders:
            feats.append(enc(feats[-1], ctx))
        return feats

    def __call__(self, fundus, angio, ctx: ForwardContext | None = None, with_features: bool = False) -> VtOutput:
        ctx = ctx or ForwardContext.eval()
        feats = self.embedding_features(fundus, angio, ctx)
        tokens = feats[-1]
        b, t, d = tokens.shape
        plane = tokens.reshape(b, t, d, 1)
        adv = F.tanh(self.adv_conv(plane)).reshape(b, t, d)
        pooled = tokens.mean(axis=1)
        logits = self.cls_out(F.gelu(self.cls_hidden(pooled)))
        probs = F.softmax(logits, axis=-1)
        return VtOutput(adv, logits, probs, feats if with_features else None)


class DiscriminatorPair:
    def __init__(self, store: ParameterStore, cfg: GanConfig, rng: np.random.Generator):
        self.store = store
        self.fine = VisionTransformerDiscriminator(store, cfg, cfg.fine_size, "vt_fine", rng)
        self.coarse = VisionTransformerDiscriminator(store, cfg, cfg.coarse_size, "vt_coarse", rng)


def build_discriminators(cfg: GanConfig, store: ParameterStore | None = None, seed: int = 0) -> DiscriminatorPair:
    store = store if store is not None else ParameterStore(cfg.dtype)
    return DiscriminatorPair(store, cfg, np.random.default_rng([seed, 2]))


def skeleton(store: ParameterStore, prefix: str) -> list[tuple[str, tuple[int, ...]]]:
    """Parameter paths (prefix stripped) with shapes, for topology comparison."""
    return [(p[len(prefix) :], store[p].shape) for p in store.paths(prefix)]
