from __future__ import annotations

from collections import OrderedDict
from typing import Iterator

import numpy as np

from .tensor import Tensor, default_dtype


class ParamSet:
    """Ordered, named collection of trainable tensors plus non-trainable buffers.

    Buffers hold batch-norm running statistics.  ``step`` counts optimizer
    updates applied to this set.
    """

    def __init__(self) -> None:
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()
        self.buffers: "OrderedDict[str, np.ndarray]" = OrderedDict()
        self.step = 0

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(value, dtype=default_dtype()), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self.params or name in self.buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=default_dtype())
        self.buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def items(self):
        return self.params.items()

    def get(self, name: str, frozen: bool = False) -> Tensor:
        """Fetch a parameter; ``frozen`` returns a detached view so no gradient reaches it."""
        t = self.params[name]
        return t.detach() if frozen else t

    def num_params(self) -> int:
        return sum(t.size for t in self.params.values())

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.zero_grad()

    def clear_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def copy(self) -> "ParamSet":
        out = ParamSet()
        for name, t in self.params.items():
            out.add(name, t.data.copy())
        for name, b in self.buffers.items():
            out.add_buffer(name, b.copy())
        out.step = self.step
        return out

    def arrays(self) -> "OrderedDict[str, np.ndarray]":
        """All parameter and buffer arrays, parameters first, in construction order."""
        out: "OrderedDict[str, np.ndarray]" = OrderedDict()
        for name, t in self.params.items():
            out[name] = t.data
        for name, b in self.buffers.items():
            out[name] = b
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for name, arr in arrays.items():
            if name in self.params:
                target = self.params[name].data
            elif name in self.buffers:
                target = self.buffers[name]
            else:
                raise KeyError(f"unknown parameter {name!r}")
            if target.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name!r}: {target.shape} vs {arr.shape}")
            target[...] = arr

    def same_layout(self, other: "ParamSet") -> bool:
        a, b = self.arrays(), other.arrays()
        return list(a) == list(b) and all(a[k].shape == b[k].shape for k in a)

    def equal(self, other: "ParamSet") -> bool:
        """Bitwise equality of every parameter and buffer."""
        if not self.same_layout(other):
            return False
        b = other.arrays()
        return all(np.array_equal(v, b[k]) for k, v in self.arrays().items())
