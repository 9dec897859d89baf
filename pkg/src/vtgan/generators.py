"""Coarse and fine encoder-decoder generators with multi-scale feature summation.

Coarse (half resolution)::

    stem -> down1 -> down2 -> res x N -> (+ sff2(down2)) -> up1 -> (+ sff1(down1)) -> up2 -> feat -> head

Fine (full resolution)::

    stem -> down -> (+ coarse feat) -> res x M -> (+ sff(fused)) -> up -> head

Heads are 1x1 convolutions to one channel followed by tanh.
"""

from __future__ import annotations

import numpy as np

from . import functional as F
from .blocks import (
    BlockConfig,
    Conv,
    ConvBnAct,
    DownsamplingBlock,
    ForwardContext,
    Layer,
    ResidualBlock,
    SFFBlock,
    UpsamplingBlock,
)
from .config import GanConfig
from .params import ParameterStore
from .resample import lanczos_resize
from .tensor import ShapeError, Tensor, as_tensor


def _bc(cfg: GanConfig, cin: int, cout: int) -> BlockConfig:
    return BlockConfig(
        cin, cout, leaky_slope=cfg.leaky_slope, bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum
    )


def _check_input(x: Tensor, size: int, channels: int, what: str) -> None:
    if x.ndim != 4 or x.shape[1:] != (size, size, channels):
        raise ShapeError(f"{what} expects Bx{size}x{size}x{channels}, got {x.shape}")


class CoarseGenerator(Layer):
    def __init__(self, store: ParameterStore, cfg: GanConfig, rng: np.random.Generator, prefix: str = "g_coarse"):
        super().__init__(store, prefix)
        self.size = cfg.coarse_size
        c = cfg.base_channels
        self.stem = ConvBnAct(store, f"{prefix}.stem", _bc(cfg, 3, c), rng)
        self.down1 = DownsamplingBlock(store, f"{prefix}.down1", _bc(cfg, c, c), rng)
        self.down2 = DownsamplingBlock(store, f"{prefix}.down2", _bc(cfg, c, 2 * c), rng)
        self.res = [
            ResidualBlock(store, f"{prefix}.res{i}", 2 * c, _bc(cfg, 2 * c, 2 * c), rng)
            for i in range(cfg.coarse_res_blocks)
        ]
        self.sff1 = SFFBlock(store, f"{prefix}.sff1", c, _bc(cfg, c, c), rng)
        self.sff2 = SFFBlock(store, f"{prefix}.sff2", 2 * c, _bc(cfg, 2 * c, 2 * c), rng)
        self.up1 = UpsamplingBlock(store, f"{prefix}.up1", _bc(cfg, 2 * c, c), rng)
        self.up2 = UpsamplingBlock(store, f"{prefix}.up2", _bc(cfg, c, c), rng)
        self.head = Conv(store, f"{prefix}.head", c, 1, rng, kernel=1)

    def __call__(self, x, ctx: ForwardContext) -> tuple[Tensor, Tensor]:
        """Return ``(angiogram, feature)``; the feature feeds the fine generator."""
        x = as_tensor(x)
        _check_input(x, self.size, 3, "coarse generator")
        h = self.stem(x, ctx)
        d1 = self.down1(h, ctx)
        d2 = self.down2(d1, ctx)
        r = d2
        for block in self.res:
            r = block(r, ctx)
        u1 = self.up1(r + self.sff2(d2, ctx), ctx)
        feat = self.up2(u1 + self.sff1(d1, ctx), ctx)
        return F.tanh(self.head(feat)), feat


class FineGenerator(Layer):
    def __init__(self, store: ParameterStore, cfg: GanConfig, rng: np.random.Generator, prefix: str = "g_fine"):
        super().__init__(store, prefix)
        self.size = cfg.fine_size
        self.channels = c = cfg.base_channels
        self.stem = ConvBnAct(store, f"{prefix}.stem", _bc(cfg, 3, c), rng)
        self.down = DownsamplingBlock(store, f"{prefix}.down1", _bc(cfg, c, c), rng)
        self.res = [
            ResidualBlock(store, f"{prefix}.res{i}", c, _bc(cfg, c, c), rng) for i in range(cfg.fine_res_blocks)
        ]
        self.sff = SFFBlock(store, f"{prefix}.sff1", c, _bc(cfg, c, c), rng)
        self.up = UpsamplingBlock(store, f"{prefix}.up1", _bc(cfg, c, c), rng)
        self.head = Conv(store, f"{prefix}.head", c, 1, rng, kernel=1)

    def __call__(self, x, coarse_feat, ctx: ForwardContext) -> Tensor:
        x, coarse_feat = as_tensor(x), as_tensor(coarse_feat)
        _check_input(x, self.size, 3, "fine generator")
        d = self.down(self.stem(x, ctx), ctx)
        if coarse_feat.shape != d.shape:
            raise ShapeError(f"coarse feature {coarse_feat.shape} cannot be injected into fine activation {d.shape}")
        fused = d + coarse_feat
        r = fused
        for block in self.res:
            r = block(r, ctx)
        u = self.up(r + self.sff(fused, ctx), ctx)
        return F.tanh(self.head(u))


class GeneratorPair:
    def __init__(self, store: ParameterStore, cfg: GanConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.store = store
        self.coarse = CoarseGenerator(store, cfg, rng)
        self.fine = FineGenerator(store, cfg, rng)

    def forward(self, fundus_hi, fundus_lo, ctx: ForwardContext) -> tuple[Tensor, Tensor]:
        fa_coarse, feat = self.coarse(fundus_lo, ctx)
        fa_fine = self.fine(fundus_hi, feat, ctx)
        return fa_fine, fa_coarse

    def synthesize(self, fundus_hi, ctx: ForwardContext | None = None) -> tuple[Tensor, Tensor]:
        """Fundus at full scale -> ``(fine angiogram, coarse angiogram)``."""
        ctx = ctx or ForwardContext.eval()
        hi = fundus_hi.data if isinstance(fundus_hi, Tensor) else np.asarray(fundus_hi, dtype=self.store.dtype)
        lo = lanczos_resize(hi, 2, "down")
        return self.forward(Tensor(hi), Tensor(lo), ctx)


def build_generators(cfg: GanConfig, store: ParameterStore | None = None, seed: int = 0) -> GeneratorPair:
    store = store if store is not None else ParameterStore(cfg.dtype)
    return GeneratorPair(store, cfg, np.random.default_rng([seed, 1]))
