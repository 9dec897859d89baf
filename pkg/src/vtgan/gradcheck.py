"""Central finite-difference gradient checks.

``gradient_check`` compares backprop gradients against numeric ones for a
scalar-valued closure. ``run_suite`` applies it to every primitive op and
composite block, plus the desk-scale discriminator.
"""

from __future__ import annotations

import time
from typing import Callable, Sequence

import numpy as np

from . import functional as F
from . import losses
from .blocks import (
    BlockConfig,
    DownsamplingBlock,
    ForwardContext,
    MultiHeadAttention,
    ResidualBlock,
    SFFBlock,
    TransformerEncoderBlock,
    UpsamplingBlock,
)
from .config import desk_gan
from .discriminators import build_discriminators
from .extractors import random_extractor
from .params import ParameterStore
from . import tensor as T
from .tensor import ShapeError, Tensor


def gradient_check(
    f: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_coords: int | None = 24,
    seed: int = 0,
) -> float:
    """Max over sampled coordinates of |analytic - numeric| / max(1, |analytic|, |numeric|)."""
    params = list(params)
    for p in params:
        if p.dtype != np.float64:
            raise TypeError("gradient checks need float64 tensors")
        p.grad = None
    out = f()
    if out.size != 1:
        raise ShapeError(f"gradient_check needs a scalar function, got shape {out.shape}")
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad.copy()
        flat = p.data.reshape(-1)
        if max_coords is None or flat.size <= max_coords:
            coords = np.arange(flat.size)
        else:
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            fp = f().item()
            flat[i] = orig - eps
            fm = f().item()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = analytic.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(1.0, abs(a), abs(num)))
    return worst


def _leaf(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)


def _primitive_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    cases = {}

    x, w, b = _leaf(rng, 1, 5, 5, 2), _leaf(rng, 3, 3, 2, 3), _leaf(rng, 3)
    cases["conv2d_s1_d2"] = (lambda x=x, w=w, b=b, r=rng.normal(size=(1, 5, 5, 3)): (F.conv2d(x, w, b, 1, 2) * Tensor(r)).sum(), [x, w, b])
    x2, w2 = _leaf(rng, 2, 6, 6, 2), _leaf(rng, 3, 3, 2, 2)
    r2 = rng.normal(size=(2, 3, 3, 2))
    cases["conv2d_s2"] = (lambda: (F.conv2d(x2, w2, None, 2) * Tensor(r2)).sum(), [x2, w2])
    x3, w3, b3 = _leaf(rng, 1, 4, 4, 2), _leaf(rng, 3, 3, 2, 3), _leaf(rng, 3)
    r3 = rng.normal(size=(1, 8, 8, 3))
    cases["transposed_conv2d"] = (lambda: (F.transposed_conv2d(x3, w3, b3, 2) * Tensor(r3)).sum(), [x3, w3, b3])
    x4, dw, pw = _leaf(rng, 1, 6, 6, 3), _leaf(rng, 3, 3, 3), _leaf(rng, 3, 4)
    r4 = rng.normal(size=(1, 6, 6, 4))
    cases["separable_conv2d_d2"] = (lambda: (F.separable_conv2d(x4, dw, pw, 1, 2) * Tensor(r4)).sum(), [x4, dw, pw])
    x5, w5, b5 = _leaf(rng, 3, 4), _leaf(rng, 4, 5), _leaf(rng, 5)
    r5 = rng.normal(size=(3, 5))
    cases["dense"] = (lambda: (F.dense(x5, w5, b5) * Tensor(r5)).sum(), [x5, w5, b5])

    for kind in ("leaky_relu", "gelu", "tanh"):
        xa = _leaf(rng, 4, 5)
        ra = rng.normal(size=(4, 5))
        cases[kind] = (lambda xa=xa, ra=ra, kind=kind: (F.activation(kind, xa) * Tensor(ra)).sum(), [xa])
    xs = _leaf(rng, 3, 4)
    rs = rng.normal(size=(3, 4))
    cases["softmax"] = (lambda: (F.softmax(xs, -1) * Tensor(rs)).sum(), [xs])

    xb, gb, bb = _leaf(rng, 2, 3, 3, 2), _leaf(rng, 2), _leaf(rng, 2)
    rb = rng.normal(size=(2, 3, 3, 2))
    rm, rv = np.zeros(2), np.ones(2)
    cases["batch_norm_train"] = (
        lambda: (F.batch_norm(xb, gb, bb, rm, rv, "train", update_stats=False) * Tensor(rb)).sum(),
        [xb, gb, bb],
    )
    rm2, rv2 = rng.normal(size=2), rng.uniform(0.5, 2.0, size=2)
    cases["batch_norm_eval"] = (lambda: (F.batch_norm(xb, gb, bb, rm2, rv2, "eval") * Tensor(rb)).sum(), [xb, gb, bb])
    xl, gl, bl = _leaf(rng, 3, 6), _leaf(rng, 6), _leaf(rng, 6)
    rl = rng.normal(size=(3, 6))
    cases["layer_norm"] = (lambda: (F.layer_norm(xl, gl, bl) * Tensor(rl)).sum(), [xl, gl, bl])
    xd = _leaf(rng, 2, 4, 4, 3)
    rd = rng.normal(size=(2, 4, 4, 3))
    cases["dropout"] = (lambda: (F.dropout(xd, 0.3, "train", seed=7, layer="gc") * Tensor(rd)).sum(), [xd])
    xp = _leaf(rng, 1, 5, 6, 2)
    rp = rng.normal(size=(1, 9, 10, 2))
    cases["reflection_pad"] = (lambda: (F.reflection_pad(xp, 2) * Tensor(rp)).sum(), [xp])
    xm = _leaf(rng, 1, 4, 4, 2)
    rmp = rng.normal(size=(1, 2, 2, 2))
    cases["max_pool2d"] = (lambda: (F.max_pool2d(xm, 2) * Tensor(rmp)).sum(), [xm])

    a, bm = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 2)
    pos = Tensor(rng.uniform(0.5, 2.0, size=(2, 3, 2)), requires_grad=True)
    re = rng.normal(size=(4, 3, 2))

    def elementwise():
        y = (a @ bm) * pos + T.exp(a[:, :, :2]) / pos - T.log(pos) + T.absolute(a[..., 1:3]) ** 3
        y = T.concat([y, T.square(y)], axis=0)
        return (y * Tensor(re)).sum() + T.concat([a, a], axis=-1).transpose(2, 0, 1).mean()

    cases["elementwise_and_shape"] = (elementwise, [a, bm, pos])

    fake, real = _leaf(rng, 2, 4, 4, 1, scale=0.5), Tensor(rng.normal(0, 0.5, size=(2, 4, 4, 1)))
    cases["loss_mse"] = (lambda: losses.mse(fake, real), [fake])
    rmap = _leaf(rng, 2, 5)
    fmap = _leaf(rng, 2, 5)
    cases["loss_hinge_d"] = (lambda: losses.hinge_d(rmap, fmap), [rmap, fmap])
    cases["loss_hinge_g"] = (lambda: losses.hinge_g(fmap), [fmap])
    logits = _leaf(rng, 3, 2)
    y1h = losses.one_hot([0, 1, 1])
    cases["loss_cce"] = (lambda: losses.cce(y1h, F.softmax(logits, -1)), [logits])
    ext = random_extractor((4, 6), seed=3)
    img_f = _leaf(rng, 1, 8, 8, 1, scale=0.5)
    img_r = Tensor(rng.normal(0, 0.5, size=(1, 8, 8, 1)))
    cases["loss_perceptual"] = (lambda: losses.perceptual(img_f, img_r, ext), [img_f])
    return cases


def _block_cases(rng) -> dict[str, tuple[Callable[[], Tensor], list[Tensor]]]:
    cases = {}
    ctx = ForwardContext(mode="train", update_stats=False)

    store = ParameterStore()
    down = DownsamplingBlock(store, "down", BlockConfig(2, 3), rng)
    xd = _leaf(rng, 2, 8, 8, 2)
    rd = rng.normal(size=(2, 4, 4, 3))
    cases["downsampling_block"] = (lambda: (down(xd, ctx) * Tensor(rd)).sum(), [xd, *store.parameters().values()])

    store = ParameterStore()
    up = UpsamplingBlock(store, "up", BlockConfig(3, 2), rng)
    xu = _leaf(rng, 2, 4, 4, 3)
    ru = rng.normal(size=(2, 8, 8, 2))
    cases["upsampling_block"] = (lambda: (up(xu, ctx) * Tensor(ru)).sum(), [xu, *store.parameters().values()])

    store = ParameterStore()
    sff = SFFBlock(store, "sff", 3, BlockConfig(3, 3), rng)
    xs = _leaf(rng, 2, 6, 6, 3)
    rs = rng.normal(size=(2, 6, 6, 3))
    cases["sff_block"] = (lambda: (sff(xs, ctx) * Tensor(rs)).sum(), [xs, *store.parameters().values()])

    store = ParameterStore()
    res = ResidualBlock(store, "res", 4, BlockConfig(4, 4), rng)
    xr = _leaf(rng, 1, 8, 8, 4)
    rr = rng.normal(size=(1, 8, 8, 4))
    cases["residual_block"] = (lambda: (res(xr, ctx) * Tensor(rr)).sum(), [xr, *store.parameters().values()])

    store = ParameterStore()
    mha = MultiHeadAttention(store, "mha", 8, 2, rng)
    xa = _leaf(rng, 2, 5, 8)
    ra = rng.normal(size=(2, 5, 8))
    cases["multi_head_attention"] = (lambda: (mha(xa) * Tensor(ra)).sum(), [xa, *store.parameters().values()])

    store = ParameterStore()
    enc = TransformerEncoderBlock(store, "enc", BlockConfig(8, 8, latent_dim=8, heads=2, mlp_sizes=(16, 8)), rng)
    xe = _leaf(rng, 2, 5, 8)
    re = rng.normal(size=(2, 5, 8))
    ev = ForwardContext.eval()
    cases["transformer_encoder_block"] = (lambda: (enc(xe, ev) * Tensor(re)).sum(), [xe, *store.parameters().values()])
    return cases


def _discriminator_case(rng):
    cfg = desk_gan()
    pair = build_discriminators(cfg, seed=int(rng.integers(1 << 30)))
    vt = pair.fine
    size = cfg.fine_size
    fundus = Tensor(rng.uniform(-1, 1, size=(1, size, size, 3)))
    angio = Tensor(rng.uniform(-1, 1, size=(1, size, size, 1)), requires_grad=True)
    label = losses.one_hot([1])
    ev = ForwardContext.eval()

    def f():
        out = vt(fundus, angio, ev)
        return out.adv_map.mean() + losses.cce(label, out.class_probs)

    params = [angio, *pair.store.parameters("vt_fine").values()]
    return f, params


def run_suite(seed: int = 0, max_coords: int = 12, include_discriminator: bool = True, verbose: bool = False) -> dict[str, float]:
    """Max relative error per op/block, all in float64."""
    rng = np.random.default_rng(seed)
    cases = {**_primitive_cases(rng), **_block_cases(rng)}
    if include_discriminator:
        cases["desk_discriminator"] = _discriminator_case(rng)
    results = {}
    for name, (f, params) in cases.items():
        t0 = time.perf_counter()
        coords = max(4, max_coords // 3) if name == "desk_discriminator" else max_coords
        results[name] = gradient_check(f, params, max_coords=coords, seed=seed)
        if verbose:
            print(f"{name:28s} max_rel_err={results[name]:.3e} ({time.perf_counter() - t0:.1f}s)")
    return results
