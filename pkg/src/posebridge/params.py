"""Named parameter arrays with gradient buffers."""

from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

from .errors import ShapeError
from .numerics import Tape, Tensor


class ParameterStore:
    """Ordered mapping ``name -> float64 array`` plus a paired gradient buffer."""

    def __init__(self, arrays: Mapping[str, np.ndarray] | None = None):
        self.arrays: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        for k, v in (arrays or {}).items():
            self.add(k, v)

    def add(self, name: str, value) -> np.ndarray:
        if name in self.arrays:
            raise KeyError(f"duplicate parameter {name!r}")
        arr = np.array(value, dtype=np.float64)
        self.arrays[name] = arr
        self.grads[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def __iter__(self) -> Iterator[str]:
        return iter(self.arrays)

    def __len__(self) -> int:
        return len(self.arrays)

    def items(self):
        return self.arrays.items()

    def names(self, prefix: str = "") -> list[str]:
        return [k for k in self.arrays if k.startswith(prefix)]

    @property
    def num_parameters(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "ParameterStore":
        return ParameterStore({k: v.copy() for k, v in self.arrays.items()})

    def watch(self, tape: Tape, prefix: str = "") -> dict[str, Tensor]:
        return {k: tape.watch(v, name=k) for k, v in self.arrays.items() if k.startswith(prefix)}

    def constants(self) -> dict[str, Tensor]:
        return {k: Tensor(v) for k, v in self.arrays.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def load(self, arrays: Mapping[str, np.ndarray], prefix: str = "") -> None:
        """Overwrite values in place; shapes must match and every name must exist."""
        for name, cur in self.arrays.items():
            key = prefix + name
            if key not in arrays:
                raise KeyError(f"missing tensor {key!r}")
            new = np.asarray(arrays[key], dtype=np.float64)
            if new.shape != cur.shape:
                raise ShapeError(f"tensor {key!r} has shape {new.shape}, expected {cur.shape}")
            cur[...] = new


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, shape or (fan_in, fan_out))
