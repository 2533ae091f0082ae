"""Named parameter tensors plus the per-parameter optimizer state."""

from __future__ import annotations

import numpy as np

from .engine import Tensor


class ParamStore:
    """Uniquely named learnable tensors and their AdamW moment accumulators."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.opt_m: dict[str, np.ndarray] = {}
        self.opt_v: dict[str, np.ndarray] = {}
        self.step: int = 0

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter name {name!r}")
        t = Tensor(np.asarray(values, dtype=self.dtype), requires_grad=True, op=name)
        self.params[name] = t
        self.opt_m[name] = np.zeros_like(t.data)
        self.opt_v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self) -> list[str]:
        return list(self.params)

    def items(self):
        return self.params.items()

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def zero_grads(self):
        for t in self.params.values():
            t.grad = None

    def astype(self, dtype) -> "ParamStore":
        """Copy with parameter values cast; optimizer state is cast too."""
        out = ParamStore(dtype)
        for name, t in self.params.items():
            out.add(name, t.data.astype(dtype))
            out.opt_m[name] = self.opt_m[name].astype(dtype)
            out.opt_v[name] = self.opt_v[name].astype(dtype)
        out.step = self.step
        return out

    def copy(self) -> "ParamStore":
        return self.astype(self.dtype)
