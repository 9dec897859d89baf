"""Image distortions for robustness evaluation: blur, sharpen, noise, pinch, whirl.

Images are ``(H, W, C)`` float arrays in [-1, 1]. Every distortion is the
identity at zero strength.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .config import DistortionConfig

KINDS = ("blur", "sharp", "noise", "pinch", "whirl")

# inclusive strength ranges
RANGES = {
    "blur": (0.0, 20.0),  # gaussian sigma, pixels
    "sharp": (0.0, 5.0),  # unsharp-mask amount
    "noise": (0.0, 1.0),  # gaussian stddev in [-1, 1] units
    "pinch": (-0.95, 0.95),  # pinch factor; negative bulges
    "whirl": (-360.0, 360.0),  # degrees of rotation at the centre
}


@dataclass
class DistortionSpec:
    kind: str
    strength: float
    seed: int = 0
    sharp_sigma: float = 1.0

    def validate(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown distortion {self.kind!r}; expected one of {KINDS}")
        lo, hi = RANGES[self.kind]
        if not lo <= self.strength <= hi:
            raise ValueError(f"{self.kind} strength {self.strength} outside [{lo}, {hi}]")


def default_spec(kind: str, cfg: DistortionConfig | None = None, seed: int = 0) -> DistortionSpec:
    cfg = cfg or DistortionConfig()
    strength = {
        "blur": cfg.blur_sigma,
        "sharp": cfg.sharp_amount,
        "noise": cfg.noise_sigma,
        "pinch": cfg.pinch,
        "whirl": cfg.whirl_degrees,
    }[kind]
    return DistortionSpec(kind, strength, seed, cfg.sharp_sigma)


def _spatial_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="reflect")


def _remap(img: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    out = np.empty_like(img)
    for c in range(img.shape[2]):
        out[..., c] = ndimage.map_coordinates(img[..., c], [rows, cols], order=1, mode="nearest")
    return out


def _polar_grid(h: int, w: int):
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    radius = math.hypot(cy, cx)
    return cy, cx, dy, dx, np.hypot(dy, dx), max(radius, 1e-12)


def whirl(img: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate each ring by an angle falling from ``degrees`` at the centre to 0 at the half-diagonal."""
    h, w = img.shape[:2]
    cy, cx, dy, dx, r, radius = _polar_grid(h, w)
    falloff = np.clip(1.0 - r / radius, 0.0, 1.0)
    angle = math.radians(degrees) * falloff * falloff
    cos, sin = np.cos(angle), np.sin(angle)
    rows = cy + dy * cos + dx * sin
    cols = cx - dy * sin + dx * cos
    return _remap(img, rows, cols)


def pinch(img: np.ndarray, amount: float) -> np.ndarray:
    """Radial remap ``r -> r * sin(pi/2 * r/R) ** -amount`` (positive pinches inwards)."""
    h, w = img.shape[:2]
    cy, cx, dy, dx, r, radius = _polar_grid(h, w)
    with np.errstate(divide="ignore", invalid="ignore"):
        factor = np.power(np.sin(0.5 * np.pi * np.clip(r / radius, 0.0, 1.0)), -amount)
    factor = np.where(r > 0, factor, 1.0)
    # keep the source inside the disc of radius R
    factor = np.minimum(factor, np.where(r > 0, radius / np.maximum(r, 1e-12), 1.0))
    return _remap(img, cy + dy * factor, cx + dx * factor)


def distort(image: np.ndarray, spec: DistortionSpec) -> np.ndarray:
    """Apply one distortion to an ``(H, W, C)`` image; output has the same shape."""
    spec.validate()
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    s = spec.strength
    if s == 0.0:
        out = img.copy()
    elif spec.kind == "blur":
        out = _spatial_blur(img, s)
    elif spec.kind == "sharp":
        out = np.clip(img + s * (img - _spatial_blur(img, spec.sharp_sigma)), -1.0, 1.0)
    elif spec.kind == "noise":
        rng = np.random.default_rng(spec.seed)
        out = np.clip(img + rng.normal(0.0, s, size=img.shape), -1.0, 1.0)
    elif spec.kind == "pinch":
        out = pinch(img, s)
    else:
        out = whirl(img, s)
    return out[..., 0] if squeeze else out
