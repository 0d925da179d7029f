"""Adam optimizer over a named parameter dict.

The update mutates parameter data in place (the one sanctioned in-place
path). Iteration order is sorted by name so runs are deterministic, and the
moment buffers round-trip through checkpoints bit-exactly.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .tensor import Tensor

__all__ = ["Adam"]


class Adam:
    def __init__(self, params: dict[str, Tensor], lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.steps = 0
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def step(self):
        self.steps += 1
        bc1 = 1.0 - self.beta1**self.steps
        bc2 = 1.0 - self.beta2**self.steps
        for name in sorted(self.params):
            p = self.params[name]
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            kernels.adam_step(
                p.data, np.ascontiguousarray(g, dtype=p.data.dtype),
                self.m[name], self.v[name],
                self.lr, self.beta1, self.beta2, self.eps, bc1, bc2,
            )

    # ---- checkpoint plumbing -------------------------------------------
    def state_arrays(self, prefix: str = "opt.") -> dict[str, np.ndarray]:
        out = {prefix + "steps": np.asarray(self.steps, dtype=np.int64)}
        for n in self.params:
            out[prefix + "m." + n] = self.m[n]
            out[prefix + "v." + n] = self.v[n]
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], prefix: str = "opt."):
        self.steps = int(arrays[prefix + "steps"])
        for n in self.params:
            self.m[n] = arrays[prefix + "m." + n].astype(self.m[n].dtype, copy=True)
            self.v[n] = arrays[prefix + "v." + n].astype(self.v[n].dtype, copy=True)
