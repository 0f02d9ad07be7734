"""Named parameter collections and their persistence."""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path

import numpy as np

from ..storage import load_arrays, save_arrays
from .tensor import Tensor


class ModelParams(OrderedDict):
    """Ordered ``name -> Tensor`` map; insertion order is the canonical order."""

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self[name] = t
        return t

    def grads(self) -> dict[str, np.ndarray]:
        return {n: (p.grad if p.grad is not None else np.zeros_like(p.data)) for n, p in self.items()}

    def zero_grad(self) -> None:
        for p in self.values():
            p.grad = None

    def copy(self) -> "ModelParams":
        out = ModelParams()
        for n, p in self.items():
            out.add(n, p.data.copy())
        return out

    def size(self) -> int:
        return sum(p.data.size for p in self.values())

    def flat(self) -> np.ndarray:
        return np.concatenate([p.data.ravel() for p in self.values()]) if self else np.zeros(0)

    def frozen(self) -> "ModelParams":
        """Copy whose tensors do not record gradients."""
        out = self.copy()
        for p in out.values():
            p.requires_grad = False
        return out


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def save_params(stem: str | Path, params: ModelParams, meta: dict | None = None):
    return save_arrays(stem, {n: p.data for n, p in params.items()}, dict(meta or {}, kind="model"))


def load_params(stem: str | Path) -> tuple[ModelParams, dict]:
    arrays, doc = load_arrays(stem)
    params = ModelParams()
    for name, arr in arrays.items():
        params.add(name, arr)
    return params, doc
