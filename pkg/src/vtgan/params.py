"""Named parameter storage shared by every network."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .tensor import Tensor


class ParameterStore:
    """Map from dot-separated paths to tensors.

    Entries are either parameters (optimised, can be frozen) or buffers
    (state such as batch-norm running statistics, never trainable).
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    def add(self, path: str, value, trainable: bool = True) -> Tensor:
        if path in self._tensors:
            raise KeyError(f"duplicate parameter path {path!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=trainable, name=path)
        self._tensors[path] = t
        return t

    def add_buffer(self, path: str, value) -> Tensor:
        t = self.add(path, value, trainable=False)
        self._buffers.add(path)
        return t

    def __getitem__(self, path: str) -> Tensor:
        return self._tensors[path]

    def __contains__(self, path: str) -> bool:
        return path in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def is_buffer(self, path: str) -> bool:
        return path in self._buffers

    def paths(self, prefix: str = "") -> list[str]:
        return [p for p in self._tensors if p.startswith(prefix)]

    def parameters(self, prefix: str = "", trainable_only: bool = False) -> dict[str, Tensor]:
        out = {}
        for p, t in self._tensors.items():
            if not p.startswith(prefix) or p in self._buffers:
                continue
            if trainable_only and not t.requires_grad:
                continue
            out[p] = t
        return out

    def count(self, prefix: str = "") -> int:
        return sum(t.size for t in self.parameters(prefix).values())

    def is_trainable(self, path: str) -> bool:
        return path not in self._buffers and self._tensors[path].requires_grad

    def freeze(self, prefix: str = "") -> None:
        for t in self.parameters(prefix).values():
            t.requires_grad = False
            t.grad = None

    def unfreeze(self, prefix: str = "") -> None:
        for t in self.parameters(prefix).values():
            t.requires_grad = True

    def zero_grad(self, prefix: str = "") -> None:
        for p in self.paths(prefix):
            self._tensors[p].grad = None

    def state_dict(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {p: self._tensors[p].data.copy() for p in self.paths(prefix)}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray], strict: bool = True) -> None:
        if strict:
            missing = set(self._tensors) - set(arrays)
            unexpected = set(arrays) - set(self._tensors)
            if missing or unexpected:
                raise KeyError(f"state mismatch: missing={sorted(missing)[:5]} unexpected={sorted(unexpected)[:5]}")
        for p, arr in arrays.items():
            if p not in self._tensors:
                continue
            t = self._tensors[p]
            if t.shape != tuple(arr.shape):
                raise ValueError(f"shape mismatch for {p}: store {t.shape}, loaded {arr.shape}")
            t.data = np.array(arr, dtype=t.dtype)
