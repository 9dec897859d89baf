"""Fundus-to-angiography translation with vision-transformer discriminators, on a numpy autodiff core."""

from .config import RunConfig, desk_gan, preset
from .tensor import Tensor, no_grad

__all__ = ["RunConfig", "Tensor", "desk_gan", "no_grad", "preset"]
__version__ = "0.1.0"
