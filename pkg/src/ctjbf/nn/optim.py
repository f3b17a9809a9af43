"""Adam optimizer with bias correction."""

from __future__ import annotations

import numpy as np

from ..errors import shape_error
from .tensor import Tensor


class Adam:
    """Standard Adam; moments are allocated lazily per parameter tensor."""

    def __init__(self, lr=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: list[np.ndarray] | None = None
        self._v: list[np.ndarray] | None = None

    def step(self, params: list[Tensor]) -> None:
        """One update using each tensor's accumulated gradient."""
        if self._m is None:
            self._m = [np.zeros_like(p.data) for p in params]
            self._v = [np.zeros_like(p.data) for p in params]
        if len(params) != len(self._m):
            raise shape_error("nn", "adam: parameter list changed between steps")
        self.step_count += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1**self.step_count
        bc2 = 1.0 - b2**self.step_count
        for p, m, v in zip(params, self._m, self._v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if g.shape != p.data.shape:
                raise shape_error("nn", f"adam: grad shape {g.shape} != param {p.data.shape}")
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


def adam_step(state: Adam, params: list[Tensor]) -> None:
    state.step(params)
