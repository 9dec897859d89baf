"""Differentiable neural-network primitives on NHWC tensors.

Every op here has a fused analytic backward. Convolution weights are laid out
``(kh, kw, c_in, c_out)``; depthwise weights are ``(kh, kw, c)``.
"""

from __future__ import annotations

import math
import zlib
from typing import Union

import numpy as np
from scipy import special

from .tensor import ShapeError, Tensor, as_tensor, make_result, matmul

PaddingSpec = Union[str, int, tuple]

LEAKY_SLOPE = 0.2
NORM_EPS = 1e-5
BN_MOMENTUM = 0.9


# --- convolution arithmetic -------------------------------------------------


def _pad_pair(size: int, k: int, stride: int, dilation: int, padding: PaddingSpec) -> tuple[int, int]:
    eff = (k - 1) * dilation + 1
    if padding == "valid":
        return 0, 0
    if padding == "same":
        out = -(-size // stride)
        total = max((out - 1) * stride + eff - size, 0)
        return total // 2, total - total // 2
    if isinstance(padding, int):
        return padding, padding
    lo, hi = padding
    return int(lo), int(hi)


def conv_output_size(size: int, k: int, stride: int = 1, dilation: int = 1, padding: PaddingSpec = "same") -> int:
    lo, hi = _pad_pair(size, k, stride, dilation, padding)
    eff = (k - 1) * dilation + 1
    out = (size + lo + hi - eff) // stride + 1
    if out < 1:
        raise ShapeError(f"convolution of extent {size} with kernel {k}, dilation {dilation} is empty")
    return out


def _split_padding(padding: PaddingSpec):
    if isinstance(padding, tuple) and len(padding) == 2 and all(isinstance(p, tuple) for p in padding):
        return padding
    return padding, padding


def _geometry(shape, k_h, k_w, stride, dilation, padding):
    _, h, w, _ = shape
    pad_h, pad_w = _split_padding(padding)
    ph = _pad_pair(h, k_h, stride, dilation, pad_h)
    pw = _pad_pair(w, k_w, stride, dilation, pad_w)
    oh = (h + ph[0] + ph[1] - (k_h - 1) * dilation - 1) // stride + 1
    ow = (w + pw[0] + pw[1] - (k_w - 1) * dilation - 1) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"convolution output would be empty for input {tuple(shape)} and kernel {k_h}x{k_w}")
    return ph, pw, oh, ow


def _tap(xp: np.ndarray, i: int, j: int, oh: int, ow: int, stride: int, dilation: int) -> np.ndarray:
    r0, c0 = i * dilation, j * dilation
    return xp[:, r0 : r0 + stride * (oh - 1) + 1 : stride, c0 : c0 + stride * (ow - 1) + 1 : stride, :]


def _check_rank4(name: str, x: np.ndarray) -> None:
    if x.ndim != 4:
        raise ShapeError(f"{name} expects a rank-4 NHWC input, got shape {x.shape}")


def _conv_forward(x, w, stride, dilation, padding):
    kh, kw, _, cout = w.shape
    ph, pw, oh, ow = _geometry(x.shape, kh, kw, stride, dilation, padding)
    xp = np.pad(x, ((0, 0), ph, pw, (0, 0))) if (ph != (0, 0) or pw != (0, 0)) else x
    out = np.zeros((x.shape[0], oh, ow, cout), dtype=np.result_type(x, w))
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, oh, ow, stride, dilation) @ w[i, j]
    return out, xp, ph, pw


def _conv_input_grad(g, w, in_shape, stride, dilation, ph, pw):
    kh, kw = w.shape[:2]
    n, h, wd, c = in_shape
    oh, ow = g.shape[1:3]
    dxp = np.zeros((n, h + ph[0] + ph[1], wd + pw[0] + pw[1], c), dtype=np.result_type(g, w))
    for i in range(kh):
        for j in range(kw):
            r0, c0 = i * dilation, j * dilation
            dxp[:, r0 : r0 + stride * (oh - 1) + 1 : stride, c0 : c0 + stride * (ow - 1) + 1 : stride, :] += (
                g @ w[i, j].T
            )
    return dxp[:, ph[0] : ph[0] + h, pw[0] : pw[0] + wd, :]


def _conv_weight_grad(xp, g, w_shape, stride, dilation):
    kh, kw = w_shape[:2]
    oh, ow = g.shape[1:3]
    gm = g.reshape(-1, g.shape[-1])
    dw = np.empty(w_shape, dtype=np.result_type(xp, g))
    for i in range(kh):
        for j in range(kw):
            patch = _tap(xp, i, j, oh, ow, stride, dilation)
            dw[i, j] = patch.reshape(-1, patch.shape[-1]).T @ gm
    return dw


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    dilation: int = 1,
    padding: PaddingSpec = "same",
) -> Tensor:
    """2-D convolution (cross-correlation) of an NHWC input with HWIO weights."""
    xd, wd = x.data, weight.data
    _check_rank4("conv2d", xd)
    if wd.ndim != 4 or wd.shape[2] != xd.shape[3]:
        raise ShapeError(f"conv2d channel mismatch: input {xd.shape} vs weight {wd.shape}")
    if stride < 1 or dilation < 1:
        raise ValueError("stride and dilation must be >= 1")
    out, xp, ph, pw = _conv_forward(xd, wd, stride, dilation, padding)
    parents = [x, weight]
    if bias is not None:
        if bias.shape != (wd.shape[3],):
            raise ShapeError(f"conv2d bias shape {bias.shape} does not match weight {wd.shape}")
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gx = _conv_input_grad(g, wd, xd.shape, stride, dilation, ph, pw) if x.requires_grad else None
        gw = _conv_weight_grad(xp, g, wd.shape, stride, dilation) if weight.requires_grad else None
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return make_result(out, parents, backward)


def transposed_conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 2,
    output_size: tuple[int, int] | None = None,
) -> Tensor:
    """Transposed convolution: the adjoint of a same-padded strided conv2d.

    ``weight`` is ``(kh, kw, c_in, c_out)`` where ``c_in`` matches ``x``.
    Output spatial size is ``input * stride`` unless ``output_size`` picks
    another extent with the same forward image.
    """
    xd, wd = x.data, weight.data
    _check_rank4("transposed_conv2d", xd)
    if wd.ndim != 4 or wd.shape[2] != xd.shape[3]:
        raise ShapeError(f"transposed_conv2d channel mismatch: input {xd.shape} vs weight {wd.shape}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    n, h, w, _ = xd.shape
    kh, kw, _, cout = wd.shape
    oh, ow = output_size if output_size is not None else (h * stride, w * stride)
    if -(-oh // stride) != h or -(-ow // stride) != w:
        raise ShapeError(f"output size {(oh, ow)} is not reachable from input {(h, w)} with stride {stride}")
    out_shape = (n, oh, ow, cout)
    ph, pw, _, _ = _geometry(out_shape, kh, kw, stride, 1, "same")
    # adjoint weight maps c_out -> c_in in the forward direction
    wt = np.swapaxes(wd, 2, 3)
    out = _conv_input_grad(xd, wt, out_shape, stride, 1, ph, pw)
    parents = [x, weight]
    if bias is not None:
        out = out + bias.data
        parents.append(bias)

    def backward(g):
        gp = np.pad(g, ((0, 0), ph, pw, (0, 0)))
        gx = None
        if x.requires_grad:
            gx = np.zeros(xd.shape, dtype=out.dtype)
            for i in range(kh):
                for j in range(kw):
                    gx += _tap(gp, i, j, h, w, stride, 1) @ wt[i, j]
        gw = None
        if weight.requires_grad:
            gw = np.swapaxes(_conv_weight_grad(gp, xd, wt.shape, stride, 1), 2, 3)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 1, 2)))
        return grads

    return make_result(out, parents, backward)


def depthwise_conv2d(
    x: Tensor, weight: Tensor, stride: int = 1, dilation: int = 1, padding: PaddingSpec = "same"
) -> Tensor:
    """Per-channel convolution with a ``(kh, kw, c)`` filter bank."""
    xd, wd = x.data, weight.data
    _check_rank4("depthwise_conv2d", xd)
    if wd.ndim != 3 or wd.shape[2] != xd.shape[3]:
        raise ShapeError(f"depthwise weight {wd.shape} needs one filter per input channel of {xd.shape}")
    kh, kw, _ = wd.shape
    ph, pw, oh, ow = _geometry(xd.shape, kh, kw, stride, dilation, padding)
    xp = np.pad(xd, ((0, 0), ph, pw, (0, 0))) if (ph != (0, 0) or pw != (0, 0)) else xd
    out = np.zeros((xd.shape[0], oh, ow, xd.shape[3]), dtype=np.result_type(xd, wd))
    for i in range(kh):
        for j in range(kw):
            out += _tap(xp, i, j, oh, ow, stride, dilation) * wd[i, j]

    def backward(g):
        gx = gw = None
        if x.requires_grad:
            dxp = np.zeros(xp.shape, dtype=out.dtype)
            for i in range(kh):
                for j in range(kw):
                    r0, c0 = i * dilation, j * dilation
                    dxp[:, r0 : r0 + stride * (oh - 1) + 1 : stride, c0 : c0 + stride * (ow - 1) + 1 : stride, :] += (
                        g * wd[i, j]
                    )
            gx = dxp[:, ph[0] : ph[0] + xd.shape[1], pw[0] : pw[0] + xd.shape[2], :]
        if weight.requires_grad:
            gw = np.empty(wd.shape, dtype=out.dtype)
            for i in range(kh):
                for j in range(kw):
                    gw[i, j] = (_tap(xp, i, j, oh, ow, stride, dilation) * g).sum(axis=(0, 1, 2))
        return gx, gw

    return make_result(out, (x, weight), backward)


def pointwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution; ``weight`` is ``(c_in, c_out)``."""
    if weight.ndim != 2 or weight.shape[0] != x.shape[-1]:
        raise ShapeError(f"pointwise weight {weight.shape} does not match input channels of {x.shape}")
    out = matmul(x, weight)
    return out + bias if bias is not None else out


def separable_conv2d(
    x: Tensor,
    depthwise_weight: Tensor,
    pointwise_weight: Tensor,
    stride: int = 1,
    dilation: int = 1,
    padding: PaddingSpec = "same",
    bias: Tensor | None = None,
) -> Tensor:
    """Depthwise convolution followed by a pointwise (1x1) convolution."""
    if depthwise_weight.ndim != 3 or depthwise_weight.shape[2] != x.shape[-1]:
        raise ShapeError(
            f"separable conv channel mismatch: input {x.shape} vs depthwise weight {depthwise_weight.shape}"
        )
    return pointwise_conv2d(depthwise_conv2d(x, depthwise_weight, stride, dilation, padding), pointwise_weight, bias)


def dense(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map over the last axis; leading axes are batch."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"dense dimension mismatch: input {x.shape} vs weight {weight.shape}")
    out = matmul(x, weight)
    return out + bias if bias is not None else out


# --- activations -------------------------------------------------------------


def leaky_relu(x: Tensor, slope: float = LEAKY_SLOPE) -> Tensor:
    xd = x.data
    pos = xd > 0
    return make_result(np.where(pos, xd, slope * xd), (x,), lambda g: (np.where(pos, g, slope * g),))


_SQRT2 = math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, x * Phi(x)."""
    xd = x.data
    cdf = 0.5 * (1.0 + special.erf(xd / _SQRT2))
    return make_result(
        xd * cdf, (x,), lambda g: (g * (cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd)),)
    )


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return make_result(out, (x,), lambda g: (g * (1.0 - out * out),))


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)
    return make_result(out, (x,), lambda g: (out * (g - (g * out).sum(axis=axis, keepdims=True)),))


_ACTIVATIONS = {"leaky_relu": leaky_relu, "gelu": gelu, "tanh": tanh, "softmax": softmax}


def activation(kind: str, x: Tensor, axis: int | None = None) -> Tensor:
    if kind not in _ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}")
    if kind == "softmax":
        if axis is None:
            raise ValueError("softmax needs an axis")
        return softmax(x, axis)
    return _ACTIVATIONS[kind](x)


# --- normalization -----------------------------------------------------------


def _normalize_backward(g, xhat, inv_std, axes, count):
    sum_g = g.sum(axis=axes, keepdims=True)
    sum_gx = (g * xhat).sum(axis=axes, keepdims=True)
    return inv_std * (g - sum_g / count - xhat * sum_gx / count)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    mode: str = "train",
    eps: float = NORM_EPS,
    momentum: float = BN_MOMENTUM,
    update_stats: bool = True,
) -> Tensor:
    """Batch normalization over every axis but the last (channel) axis.

    In train mode the running statistics are updated in place unless
    ``update_stats`` is false.
    """
    xd = x.data
    c = xd.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm channel mismatch: input {xd.shape} vs gamma {gamma.shape}")
    axes = tuple(range(xd.ndim - 1))
    gd, bd = gamma.data, beta.data
    if mode == "eval":
        inv_std = 1.0 / np.sqrt(running_var + eps)
        scale = gd * inv_std
        xhat = (xd - running_mean) * inv_std
        out = xhat * gd + bd

        def backward_eval(g):
            return g * scale, (g * xhat).sum(axis=axes), g.sum(axis=axes)

        return make_result(out, (x, gamma, beta), backward_eval)
    if mode != "train":
        raise ValueError(f"unknown batch_norm mode {mode!r}")
    count = xd.size // c
    if count < 2:
        raise ValueError(f"batch_norm in train mode needs >= 2 values per channel, input has shape {xd.shape}")
    mu = xd.mean(axis=axes)
    centered = xd - mu
    var = (centered * centered).mean(axis=axes)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    out = xhat * gd + bd
    if update_stats:
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var

    def backward(g):
        gx = _normalize_backward(g * gd, xhat, inv_std, axes, count) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return make_result(out, (x, gamma, beta), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Normalize each vector along the last axis, then scale and shift."""
    xd = x.data
    d = xd.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layer_norm dimension mismatch: input {xd.shape} vs gamma {gamma.shape}")
    mu = xd.mean(axis=-1, keepdims=True)
    centered = xd - mu
    var = (centered * centered).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    gd = gamma.data
    lead = tuple(range(xd.ndim - 1))

    def backward(g):
        gx = _normalize_backward(g * gd, xhat, inv_std, -1, d) if x.requires_grad else None
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return make_result(xhat * gd + beta.data, (x, gamma, beta), backward)


# --- regularization and padding ----------------------------------------------


def dropout_rng(seed: int, layer: str, step: int) -> np.random.Generator:
    """Counter-based generator keyed by (seed, layer, step)."""
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(layer.encode()), int(step) & 0xFFFFFFFF])
    return np.random.Generator(np.random.Philox(key))


def dropout(
    x: Tensor, rate: float, mode: str = "train", seed: int = 0, layer: str = "", step: int = 0
) -> Tensor:
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode == "eval" or rate == 0.0:
        return x
    keep = dropout_rng(seed, layer, step).random(x.shape) >= rate
    scale = np.where(keep, 1.0 / (1.0 - rate), 0.0).astype(x.dtype)
    return make_result(x.data * scale, (x,), lambda g: (g * scale,))


def reflection_pad(x: Tensor, pad: int) -> Tensor:
    """Mirror-pad the two spatial axes of an NHWC tensor (edge pixel not repeated)."""
    if pad == 0:
        return x
    xd = x.data
    _check_rank4("reflection_pad", xd)
    if pad < 0 or pad >= min(xd.shape[1], xd.shape[2]):
        raise ValueError(f"reflection pad {pad} too large for spatial extent {xd.shape[1:3]}")
    out = np.pad(xd, ((0, 0), (pad, pad), (pad, pad), (0, 0)), mode="reflect")

    def fold(g, axis):
        g = np.moveaxis(g, axis, 0)
        core = g[pad:-pad].copy()
        for k in range(1, pad + 1):
            core[k] += g[pad - k]
            core[-1 - k] += g[-1 - pad + k]
        return np.moveaxis(core, 0, axis)

    return make_result(out, (x,), lambda g: (fold(fold(g, 1), 2),))


def max_pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; spatial dims must divide by ``size``."""
    xd = x.data
    n, h, w, c = xd.shape
    if h % size or w % size:
        raise ShapeError(f"max_pool2d size {size} does not divide spatial dims of {xd.shape}")
    blocks = xd.reshape(n, h // size, size, w // size, size, c).transpose(0, 1, 3, 5, 2, 4)
    blocks = blocks.reshape(n, h // size, w // size, c, size * size)
    idx = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, idx[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros(blocks.shape, dtype=g.dtype)
        np.put_along_axis(gb, idx[..., None], g[..., None], axis=-1)
        gb = gb.reshape(n, h // size, w // size, c, size, size).transpose(0, 1, 4, 2, 5, 3)
        return (gb.reshape(n, h, w, c),)

    return make_result(out, (x,), backward)


def global_avg_pool(x: Tensor) -> Tensor:
    return as_tensor(x).mean(axis=(1, 2))
