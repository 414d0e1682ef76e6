"""Named parameter storage shared by layers."""
from __future__ import annotations

import math
from typing import Iterator

import numpy as np

from .tensor import Tensor


class ParamStore:
    """Ordered mapping of parameter name -> leaf :class:`Tensor`.

    Registering an existing name with the same shape returns the existing
    entry, which is how weights are shared between layers.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def register(self, name: str, shape: tuple, init: str, rng: np.random.Generator | None = None) -> Tensor:
        shape = tuple(int(n) for n in shape)
        if name in self._params:
            existing = self._params[name]
            if existing.shape != shape:
                raise ValueError(f"parameter {name!r} re-registered with shape {shape}, has {existing.shape}")
            return existing
        if init == "zeros":
            data = np.zeros(shape, dtype=self.dtype)
        elif init == "glorot":
            if rng is None:
                raise ValueError("glorot init needs an rng")
            # fan_in/fan_out over (*kernel, c_in, c_out)
            receptive = math.prod(shape[:-2]) if len(shape) > 2 else 1
            fan_in, fan_out = shape[-2] * receptive, shape[-1] * receptive
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            data = rng.uniform(-limit, limit, size=shape).astype(self.dtype)
        else:
            raise ValueError(f"unknown init {init!r}")
        t = Tensor(data, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list[str]:
        return list(self._params)

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in self._params.items()}

    def count(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self) -> None:
        for t in self._params.values():
            t.grad = None

    def state(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self._params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self._params) - set(state)
        if missing:
            raise KeyError(f"state is missing parameters: {sorted(missing)}")
        for k, t in self._params.items():
            arr = np.asarray(state[k])
            if arr.shape != t.shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {t.shape}")
            t.data = arr.astype(self.dtype, copy=True)
