"""Named parameter storage and initialisation."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from .autodiff import DEFAULT_DTYPE, Tensor
from .layers import he_std


class ParameterSet:
    """Ordered collection of named tensors.

    Trainable parameters are stepped by the optimiser; buffers (batch-norm
    running statistics) are persisted alongside but never differentiated.
    Insertion order is the iteration and serialisation order.
    """

    def __init__(self, dtype=DEFAULT_DTYPE):
        self.dtype = np.dtype(dtype)
        self._tensors: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    def add(self, name: str, value: np.ndarray, trainable: bool = True) -> Tensor:
        if name in self._tensors:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), name=name)
        self._tensors[name] = t
        if not trainable:
            self._buffers.add(name)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self):
        return self._tensors.items()

    def is_trainable(self, name: str) -> bool:
        return name not in self._buffers

    def trainable(self) -> dict[str, Tensor]:
        return {k: t for k, t in self._tensors.items() if k not in self._buffers}

    def count(self, trainable_only: bool = False) -> int:
        return sum(t.size for k, t in self._tensors.items()
                   if not trainable_only or k not in self._buffers)

    def set(self, name: str, value: np.ndarray) -> None:
        t = self._tensors[name]
        value = np.asarray(value)
        if value.shape != t.shape:
            raise ValueError(f"shape mismatch for {name!r}: {value.shape} vs {t.shape}")
        t.data = value.astype(self.dtype, copy=True)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data.copy() for k, t in self._tensors.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self._tensors) ^ set(arrays)
        if missing:
            raise KeyError(f"parameter names differ: {sorted(missing)}")
        for k, v in arrays.items():
            self.set(k, v)

    def copy(self) -> "ParameterSet":
        out = ParameterSet(self.dtype)
        for k, t in self._tensors.items():
            out.add(k, t.data, trainable=k not in self._buffers)
        return out

    def astype(self, dtype) -> "ParameterSet":
        out = ParameterSet(dtype)
        for k, t in self._tensors.items():
            out.add(k, t.data, trainable=k not in self._buffers)
        return out

    def layout(self) -> list[tuple[str, tuple[int, ...]]]:
        return [(k, tuple(t.shape)) for k, t in self._tensors.items()]


class Initializer:
    """Seeded He-normal initialisation for convolution and dense weights."""

    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)

    def conv(self, params: ParameterSet, prefix: str, c_in: int, c_out: int, k: int) -> None:
        std = he_std(c_in * k * k)
        params.add(f"{prefix}.weight", self.rng.normal(0.0, std, (c_out, c_in, k, k)))
        params.add(f"{prefix}.bias", np.zeros(c_out))

    def dense(self, params: ParameterSet, prefix: str, n_in: int, n_out: int) -> None:
        params.add(f"{prefix}.weight", self.rng.normal(0.0, he_std(n_in), (n_out, n_in)))
        params.add(f"{prefix}.bias", np.zeros(n_out))

    @staticmethod
    def prelu(params: ParameterSet, prefix: str, channels: int) -> None:
        params.add(f"{prefix}.slope", np.full(channels, 0.25))

    @staticmethod
    def batch_norm(params: ParameterSet, prefix: str, channels: int) -> None:
        params.add(f"{prefix}.scale", np.ones(channels))
        params.add(f"{prefix}.shift", np.zeros(channels))
        params.add(f"{prefix}.running_mean", np.zeros(channels), trainable=False)
        params.add(f"{prefix}.running_var", np.ones(channels), trainable=False)
