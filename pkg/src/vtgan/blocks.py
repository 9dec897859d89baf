"""Layers and composite blocks used by the generators and discriminators.

Layers keep no tensors of their own: each holds a reference to a
:class:`ParameterStore` and a path prefix, and looks its weights up on every
call, so loading a checkpoint into the store takes effect immediately.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import functional as F
from .params import ParameterStore
from .tensor import ShapeError, Tensor


@dataclass
class ForwardContext:
    """Per-call switches: train/eval mode, dropout keying and BN stat updates."""

    mode: str = "train"
    seed: int = 0
    step: int = 0
    update_stats: bool = True

    @classmethod
    def eval(cls) -> "ForwardContext":
        return cls(mode="eval", update_stats=False)


def he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape)


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Layer:
    def __init__(self, store: ParameterStore, prefix: str):
        self.store = store
        self.prefix = prefix

    def p(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def add(self, name: str, value, trainable: bool = True) -> None:
        self.store.add(f"{self.prefix}.{name}", value, trainable)

    def add_buffer(self, name: str, value) -> None:
        self.store.add_buffer(f"{self.prefix}.{name}", value)


class Conv(Layer):
    def __init__(self, store, prefix, cin, cout, rng, kernel=3, stride=1, dilation=1, bias=True, padding="same"):
        super().__init__(store, prefix)
        self.stride, self.dilation, self.padding, self.bias = stride, dilation, padding, bias
        self.add("w", he_normal(rng, (kernel, kernel, cin, cout), kernel * kernel * cin))
        if bias:
            self.add("b", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        b = self.p("b") if self.bias else None
        return F.conv2d(x, self.p("w"), b, self.stride, self.dilation, self.padding)


class TransposedConv(Layer):
    def __init__(self, store, prefix, cin, cout, rng, kernel=3, stride=2, bias=False):
        super().__init__(store, prefix)
        self.stride, self.bias = stride, bias
        # fan-in of a stride-s transposed conv is roughly k*k*cin / s^2
        fan_in = max(1, kernel * kernel * cin // (stride * stride))
        self.add("w", he_normal(rng, (kernel, kernel, cin, cout), fan_in))
        if bias:
            self.add("b", np.zeros(cout))

    def __call__(self, x: Tensor) -> Tensor:
        b = self.p("b") if self.bias else None
        return F.transposed_conv2d(x, self.p("w"), b, self.stride)


class SeparableConv(Layer):
    def __init__(self, store, prefix, cin, cout, rng, kernel=3, dilation=1, padding="valid"):
        super().__init__(store, prefix)
        self.dilation, self.padding = dilation, padding
        self.add("dw", he_normal(rng, (kernel, kernel, cin), kernel * kernel))
        self.add("pw", he_normal(rng, (cin, cout), cin))

    def __call__(self, x: Tensor) -> Tensor:
        return F.separable_conv2d(x, self.p("dw"), self.p("pw"), 1, self.dilation, self.padding)


class BatchNorm(Layer):
    def __init__(self, store, prefix, channels, eps=F.NORM_EPS, momentum=F.BN_MOMENTUM):
        super().__init__(store, prefix)
        self.eps, self.momentum = eps, momentum
        self.add("gamma", np.ones(channels))
        self.add("beta", np.zeros(channels))
        self.add_buffer("running_mean", np.zeros(channels))
        self.add_buffer("running_var", np.ones(channels))

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return F.batch_norm(
            x,
            self.p("gamma"),
            self.p("beta"),
            self.p("running_mean").data,
            self.p("running_var").data,
            mode=ctx.mode,
            eps=self.eps,
            momentum=self.momentum,
            update_stats=ctx.update_stats,
        )


class LayerNorm(Layer):
    def __init__(self, store, prefix, dim, eps=F.NORM_EPS):
        super().__init__(store, prefix)
        self.eps = eps
        self.add("gamma", np.ones(dim))
        self.add("beta", np.zeros(dim))

    def __call__(self, x: Tensor) -> Tensor:
        return F.layer_norm(x, self.p("gamma"), self.p("beta"), self.eps)


class Dense(Layer):
    def __init__(self, store, prefix, din, dout, rng, bias=True):
        super().__init__(store, prefix)
        self.bias = bias
        self.add("w", glorot_uniform(rng, (din, dout), din, dout))
        if bias:
            self.add("b", np.zeros(dout))

    def __call__(self, x: Tensor) -> Tensor:
        return F.dense(x, self.p("w"), self.p("b") if self.bias else None)


# --- generator blocks ----------------------------------------------------------


@dataclass
class BlockConfig:
    in_channels: int
    out_channels: int
    kernel: int = 3
    stride: int = 1
    dilations: tuple[int, ...] = (1, 2)
    latent_dim: int = 64
    heads: int = 4
    mlp_sizes: tuple[int, ...] = (128, 64)
    dropout_rate: float = 0.1
    leaky_slope: float = F.LEAKY_SLOPE
    bn_eps: float = F.NORM_EPS
    bn_momentum: float = F.BN_MOMENTUM


class ConvBnAct(Layer):
    """Convolution -> batch norm -> leaky ReLU."""

    def __init__(self, store, prefix, cfg: BlockConfig, rng, stride=1):
        super().__init__(store, prefix)
        self.slope = cfg.leaky_slope
        self.conv = Conv(store, f"{prefix}.conv", cfg.in_channels, cfg.out_channels, rng, cfg.kernel, stride, bias=False)
        self.bn = BatchNorm(store, f"{prefix}.bn", cfg.out_channels, cfg.bn_eps, cfg.bn_momentum)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return F.leaky_relu(self.bn(self.conv(x), ctx), self.slope)


class DownsamplingBlock(ConvBnAct):
    """Stride-2 conv, batch norm, leaky ReLU: halves the spatial extent."""

    def __init__(self, store, prefix, cfg: BlockConfig, rng):
        super().__init__(store, prefix, cfg, rng, stride=2)


class UpsamplingBlock(Layer):
    """Stride-2 transposed conv, batch norm, leaky ReLU: doubles the spatial extent."""

    def __init__(self, store, prefix, cfg: BlockConfig, rng):
        super().__init__(store, prefix)
        self.slope = cfg.leaky_slope
        self.tconv = TransposedConv(store, f"{prefix}.tconv", cfg.in_channels, cfg.out_channels, rng, cfg.kernel, 2)
        self.bn = BatchNorm(store, f"{prefix}.bn", cfg.out_channels, cfg.bn_eps, cfg.bn_momentum)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        return F.leaky_relu(self.bn(self.tconv(x), ctx), self.slope)


class SFFBlock(Layer):
    """Spatial feature fusion: two conv units, both skips taken from the block input."""

    def __init__(self, store, prefix, channels: int, cfg: BlockConfig, rng):
        super().__init__(store, prefix)
        unit_cfg = BlockConfig(channels, channels, leaky_slope=cfg.leaky_slope, bn_eps=cfg.bn_eps, bn_momentum=cfg.bn_momentum)
        self.unit1 = ConvBnAct(store, f"{prefix}.unit1", unit_cfg, rng)
        self.unit2 = ConvBnAct(store, f"{prefix}.unit2", unit_cfg, rng)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        s1 = x + self.unit1(x, ctx)
        return x + self.unit2(s1, ctx)


class SepUnit(Layer):
    """Reflection pad -> separable conv -> batch norm -> leaky ReLU, shape preserving."""

    def __init__(self, store, prefix, channels: int, dilation: int, cfg: BlockConfig, rng):
        super().__init__(store, prefix)
        self.dilation = dilation
        self.slope = cfg.leaky_slope
        self.sepconv = SeparableConv(store, f"{prefix}.sepconv", channels, channels, rng, cfg.kernel, dilation)
        self.bn = BatchNorm(store, f"{prefix}.bn", channels, cfg.bn_eps, cfg.bn_momentum)
        self.pad = dilation * (cfg.kernel - 1) // 2

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        y = self.sepconv(F.reflection_pad(x, self.pad))
        return F.leaky_relu(self.bn(y, ctx), self.slope)


class ResidualBlock(Layer):
    """Separable-conv stem feeding a d=1 and a d=2 branch, summed with the input."""

    def __init__(self, store, prefix, channels: int, cfg: BlockConfig, rng):
        super().__init__(store, prefix)
        d_lo, d_hi = cfg.dilations
        self.stem = SepUnit(store, f"{prefix}.stem", channels, 1, cfg, rng)
        self.branch_lo = SepUnit(store, f"{prefix}.branch_d{d_lo}", channels, d_lo, cfg, rng)
        self.branch_hi = SepUnit(store, f"{prefix}.branch_d{d_hi}", channels, d_hi, cfg, rng)

    def __call__(self, x: Tensor, ctx: ForwardContext) -> Tensor:
        stem = self.stem(x, ctx)
        return self.branch_lo(stem, ctx) + self.branch_hi(stem, ctx) + x


# --- transformer blocks ----------------------------------------------------------


class MultiHeadAttention(Layer):
    def __init__(self, store, prefix, dim: int, heads: int, rng):
        super().__init__(store, prefix)
        if dim % heads:
            raise ValueError(f"latent dim {dim} is not divisible by {heads} heads")
        self.dim, self.heads = dim, heads
        self.q = Dense(store, f"{prefix}.q", dim, dim, rng)
        self.k = Dense(store, f"{prefix}.k", dim, dim, rng)
        self.v = Dense(store, f"{prefix}.v", dim, dim, rng)
        self.o = Dense(store, f"{prefix}.o", dim, dim, rng)

    def _split(self, t: Tensor) -> Tensor:
        b, n, _ = t.shape
        return t.reshape(b, n, self.heads, self.dim // self.heads).transpose(0, 2, 1, 3)

    def __call__(self, tokens: Tensor, return_weights: bool = False):
        squeeze = tokens.ndim == 2
        if squeeze:
            tokens = tokens.reshape(1, *tokens.shape)
        if tokens.shape[-1] != self.dim:
            raise ShapeError(f"attention expects token dim {self.dim}, got {tokens.shape}")
        b, n, _ = tokens.shape
        q, k, v = self._split(self.q(tokens)), self._split(self.k(tokens)), self._split(self.v(tokens))
        scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(self.dim // self.heads))
        weights = F.softmax(scores, axis=-1)
        ctx = (weights @ v).transpose(0, 2, 1, 3).reshape(b, n, self.dim)
        out = self.o(ctx)
        if squeeze:
            out = out.reshape(n, self.dim)
        return (out, weights) if return_weights else out


class TransformerEncoderBlock(Layer):
    """Pre-norm encoder: tokens + MHA(LN(tokens)), then + MLP(LN(.))."""

    def __init__(self, store, prefix, cfg: BlockConfig, rng):
        super().__init__(store, prefix)
        d = cfg.latent_dim
        if cfg.mlp_sizes[-1] != d:
            raise ValueError(f"last MLP width {cfg.mlp_sizes[-1]} must equal latent dim {d}")
        self.rate = cfg.dropout_rate
        self.ln1 = LayerNorm(store, f"{prefix}.ln1", d)
        self.mha = MultiHeadAttention(store, f"{prefix}.mha", d, cfg.heads, rng)
        self.ln2 = LayerNorm(store, f"{prefix}.ln2", d)
        self.mlp = []
        din = d
        for i, h in enumerate(cfg.mlp_sizes):
            self.mlp.append(Dense(store, f"{prefix}.mlp{i}", din, h, rng))
            din = h

    def __call__(self, tokens: Tensor, ctx: ForwardContext) -> Tensor:
        t1 = tokens + self.mha(self.ln1(tokens))
        h = self.ln2(t1)
        for i, layer in enumerate(self.mlp):
            h = F.gelu(layer(h))
            h = F.dropout(h, self.rate, ctx.mode, ctx.seed, f"{self.prefix}.mlp{i}", ctx.step)
        return t1 + h
